from __future__ import annotations

from datetime import datetime, timezone

from rich.box import ROUNDED
from rich.panel import Panel
from rich.text import Text
from textual.events import Key
from textual.reactive import reactive
from textual.screen import Screen
from textual.widgets import Static

from .ui_widgets import HIGH_COLOR, LOW_COLOR, MID_COLOR

RUN_STYLES = {"running": "green", "ok": "cyan", "halted": "yellow", "aborted": "bold red"}


class Legend(Static):
    def render(self):  # type: ignore[override]
        t = Text()
        t.append("Escala: ", style="bold")
        t.append("█ baja ", style=f"{LOW_COLOR} bold")
        t.append("█ media ", style=f"{MID_COLOR} bold")
        t.append("█ alta", style=f"{HIGH_COLOR} bold")
        t.append("\nTabla: últimas filas de metrics.csv", style="grey70")
        return Panel(t, title="Ayuda rápida", border_style="cyan", box=ROUNDED)


def _fmt(value, spec: str) -> str:
    return "—" if value is None else format(value, spec)


class StatusBar(Static):
    step = reactive(None)
    loss = reactive(None)
    lr = reactive(None)
    psnr = reactive(None)
    throughput = reactive(0.0)
    rows = reactive(0)
    paused = reactive(False)
    run_status = reactive("—")

    def render(self):  # type: ignore[override]
        txt = Text()
        txt.append(f" Paso: {_fmt(self.step, '.0f')}  ", style="bold")
        txt.append(f"Pérdida: {_fmt(self.loss, '.4g')}  ", style="bold")
        txt.append(f"LR: {_fmt(self.lr, '.2e')}  ", style="cyan")
        txt.append(f"PSNR: {_fmt(self.psnr, '.2f')} dB  ", style="magenta")
        if self.throughput:
            txt.append(f"Pasos/s: {self.throughput:.2f}  ", style="bold")
        txt.append(f"Filas: {self.rows}  ", style="white")
        txt.append("PAUSADO  " if self.paused else "SIGUIENDO  ", style="yellow" if self.paused else "green")
        txt.append(f"Run: {self.run_status}  ", style=RUN_STYLES.get(self.run_status, "grey50"))
        txt.append(f"UTC: {datetime.now(timezone.utc).strftime('%H:%M:%S')}  ", style="white")
        return Panel(txt, border_style="cyan", box=ROUNDED)


class HelpScreen(Screen):
    def on_mount(self):  # type: ignore[override]
        from rich.align import Align

        txt = Text()
        txt.append("\nControles\n", style="bold underline")
        txt.append(
            " q  → salir\n"
            " p  → pausar/reanudar la lectura\n"
            " l  → escala logarítmica en el gráfico\n"
            " r  → releer metrics.csv desde el principio\n"
            " h / ?  → esta ayuda\n\n"
        )
        txt.append("Colores del gráfico: verde = pérdida baja, rojo = alta\n", style="grey70")
        self.mount(Static(Panel(Align.left(txt), title="Ayuda", border_style="magenta", box=ROUNDED)))

    async def on_key(self, _: Key):  # type: ignore[override]
        self.app.pop_screen()
