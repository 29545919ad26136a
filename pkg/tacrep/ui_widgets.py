from __future__ import annotations

import math
from typing import List, Sequence, Tuple

from rich.box import ROUNDED
from rich.console import Group
from rich.panel import Panel
from rich.text import Text
from textual.widget import Widget

BAR_GLYPHS = " ▁▂▃▄▅▆▇█"
LOW_COLOR = "#22c55e"
MID_COLOR = "#facc15"
HIGH_COLOR = "#f87171"


def _hex_to_rgb(value: str) -> Tuple[int, int, int]:
    value = value.lstrip("#")
    return tuple(int(value[idx : idx + 2], 16) for idx in (0, 2, 4))


def blend(start: str, end: str, factor: float) -> str:
    factor = max(0.0, min(1.0, factor))
    sr, sg, sb = _hex_to_rgb(start)
    er, eg, eb = _hex_to_rgb(end)
    r = int(round(sr + (er - sr) * factor))
    g = int(round(sg + (eg - sg) * factor))
    b = int(round(sb + (eb - sb) * factor))
    return f"#{r:02x}{g:02x}{b:02x}"


def grade_color(fraction: float) -> str:
    """Verde (pérdida baja) → amarillo → rojo (pérdida alta)."""
    if fraction <= 0.5:
        return blend(LOW_COLOR, MID_COLOR, fraction * 2.0)
    return blend(MID_COLOR, HIGH_COLOR, (fraction - 0.5) * 2.0)


def resample(values: Sequence[float], width: int) -> List[float]:
    """Reduce la serie a `width` columnas promediando tramos consecutivos."""
    finite = [v for v in values if v is not None and math.isfinite(v)]
    if width <= 0 or not finite:
        return []
    if len(finite) <= width:
        return list(finite)
    out = []
    for col in range(width):
        lo = col * len(finite) // width
        hi = max(lo + 1, (col + 1) * len(finite) // width)
        chunk = finite[lo:hi]
        out.append(sum(chunk) / len(chunk))
    return out


def bar_levels(values: Sequence[float], height: int, log_scale: bool = False) -> Tuple[List[int], List[float]]:
    """Altura de cada barra en octavos de celda (0..8*height) y su fracción normalizada."""
    if not values:
        return [], []
    data = [math.log10(max(v, 1e-12)) for v in values] if log_scale else list(values)
    lo, hi = min(data), max(data)
    span = hi - lo
    fractions = [(v - lo) / span if span > 0 else 0.5 for v in data]
    levels = [max(1, int(round(f * 8 * height))) for f in fractions]
    return levels, fractions


class LossChart(Widget):
    """Gráfico de barras de la pérdida, coloreado por valor relativo."""

    values: List[float] = []
    log_scale: bool = False

    def render(self):  # type: ignore[override]
        width = max(1, self.size.width - 4)
        height = max(1, self.size.height - 2)
        columns = resample(self.values, width)
        title = "pérdida (log)" if self.log_scale else "pérdida"
        if not columns:
            return Panel(Text("esperando metrics.csv…", style="grey50"), title=title, border_style="cyan", box=ROUNDED)
        levels, fractions = bar_levels(columns, height, self.log_scale)
        colors = [grade_color(f) for f in fractions]
        rows = []
        for row in range(height):
            floor = (height - 1 - row) * 8
            line = Text()
            for level, color in zip(levels, colors):
                glyph = BAR_GLYPHS[max(0, min(8, level - floor))]
                line.append(glyph, style=color)
            rows.append(line)
        finite = [v for v in self.values if v is not None and math.isfinite(v)]
        subtitle = f"min {min(finite):.4g} · max {max(finite):.4g} · últ {finite[-1]:.4g}"
        return Panel(Group(*rows), title=title, subtitle=subtitle, border_style="cyan", box=ROUNDED)
