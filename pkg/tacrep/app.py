"""Monitor en vivo de un directorio de ejecución: sigue `metrics.csv` y `ledger.json`."""

from __future__ import annotations

import json
import math
import time
from collections import deque
from pathlib import Path
from typing import Deque, Dict, List, Optional, Tuple

from rich.text import Text
from textual.app import App, ComposeResult
from textual.containers import Horizontal, Vertical
from textual.widgets import DataTable, Footer, Header

from .exporters import MetricsTail
from .ui_components import HelpScreen, Legend, StatusBar
from .ui_widgets import LossChart

TABLE_COLUMNS = ["step", "loss", "lr", "grad_norm", "psnr"]
SPIKE_FACTOR = 2.0


def severity_of(row: Dict[str, Optional[float]], previous: Optional[float]) -> Optional[str]:
    loss = row.get("loss")
    if loss is None or not math.isfinite(loss):
        return "critical"
    if previous is not None and previous > 0 and loss > SPIKE_FACTOR * previous:
        return "warn"
    return None


def _cell(value: Optional[float], column: str) -> str:
    if value is None:
        return "—"
    if column == "step":
        return f"{int(value)}"
    if column == "lr":
        return f"{value:.2e}"
    return f"{value:.4g}"


class RunMonitorApp(App):
    CSS = """
    Screen { layout: vertical; }
    #main { height: 1fr; }
    #chart { width: 1fr; }
    #right { width: 64; min-width: 48; }
    DataTable { height: 1fr; }
    """

    BINDINGS = [
        ("q", "quit", "Salir"),
        ("p", "toggle_pause", "Pausar"),
        ("l", "toggle_log", "Escala log"),
        ("r", "reload", "Releer"),
        ("h", "toggle_help", "Ayuda"),
        ("?", "toggle_help", "Ayuda"),
    ]

    def __init__(self, *, run_dir: Path, interval: float = 1.0, max_rows: int = 50, history: int = 2000):
        super().__init__()
        self.run_dir = Path(run_dir)
        self.title = f"tacrep · {self.run_dir}"
        self.tick_interval = interval
        self.max_rows = max_rows
        self.paused = False
        self.tail = MetricsTail(self.run_dir / "metrics.csv")
        self.rows: Deque[Dict[str, Optional[float]]] = deque(maxlen=history)
        self.latest: Dict[str, Optional[float]] = {}
        self._progress: Deque[Tuple[float, float]] = deque(maxlen=20)

    def compose(self) -> ComposeResult:  # type: ignore[override]
        yield Header(show_clock=True)
        with Vertical(id="main"):
            with Horizontal():
                self.chart = LossChart(id="chart")
                yield self.chart
                with Vertical(id="right"):
                    self.table = DataTable(zebra_stripes=True)
                    yield self.table
                    yield Legend()
            self.status = StatusBar()
            yield self.status
        yield Footer()

    def on_mount(self) -> None:  # type: ignore[override]
        self.table.add_columns(*TABLE_COLUMNS)
        self.table.cursor_type = "row"
        self.set_interval(self.tick_interval, self._tick)
        self._tick()

    def _run_status(self) -> str:
        try:
            return str(json.loads((self.run_dir / "ledger.json").read_text(encoding="utf-8")).get("status", "—"))
        except (OSError, ValueError):
            return "—"

    def _ingest(self, new_rows: List[Dict[str, Optional[float]]]) -> None:
        if self.tail.reset:
            self.rows.clear()
            self.latest = {}
            self._progress.clear()
        for row in new_rows:
            self.rows.append(row)
            for key, value in row.items():
                if value is not None:
                    self.latest[key] = value
        step = self.latest.get("step")
        if new_rows and step is not None:
            self._progress.append((time.monotonic(), step))

    def _throughput(self) -> float:
        if len(self._progress) < 2:
            return 0.0
        (t0, s0), (t1, s1) = self._progress[0], self._progress[-1]
        return (s1 - s0) / (t1 - t0) if t1 > t0 else 0.0

    def _push_table(self) -> None:
        self.table.clear()
        recent = list(self.rows)[-self.max_rows :]
        previous: Optional[float] = None
        styles = {None: None, "warn": "yellow", "critical": "bold red"}
        for row in recent:
            style = styles[severity_of(row, previous)]
            cells = []
            for column in TABLE_COLUMNS:
                t = Text(_cell(row.get(column), column))
                if style:
                    t.stylize(style)
                cells.append(t)
            self.table.add_row(*cells)
            loss = row.get("loss")
            if loss is not None and math.isfinite(loss):
                previous = loss
        if recent:
            self.table.move_cursor(row=len(recent) - 1)

    def _tick(self) -> None:
        self.status.paused = self.paused
        if self.paused:
            return
        new_rows = self.tail.poll()
        if new_rows or self.tail.reset:
            self._ingest(new_rows)
            self.chart.values = [r.get("loss") for r in self.rows]
            self._push_table()
            self.chart.refresh()
        self.status.step = self.latest.get("step")
        self.status.loss = self.latest.get("loss")
        self.status.lr = self.latest.get("lr")
        self.status.psnr = self.latest.get("psnr")
        self.status.rows = len(self.rows)
        self.status.throughput = self._throughput()
        self.status.run_status = self._run_status()

    def action_quit(self):
        self.exit()

    def action_toggle_pause(self):
        self.paused = not self.paused
        self.status.paused = self.paused

    def action_toggle_log(self):
        self.chart.log_scale = not self.chart.log_scale
        self.chart.refresh()

    def action_reload(self):
        self.tail = MetricsTail(self.tail.path)
        self.rows.clear()
        self.latest = {}
        self._progress.clear()
        self.chart.values = []
        self._push_table()
        self._tick()

    def action_toggle_help(self):
        self.push_screen(HelpScreen())
