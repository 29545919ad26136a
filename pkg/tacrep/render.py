"""Renderizado de campos de fuerza: color = campo normal, flechas = cizalla."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import matplotlib

matplotlib.use("Agg")
import numpy as np
from matplotlib import colormaps
from PIL import Image, ImageDraw

from .errors import ConfigError
from .fields import FieldPair

logger = logging.getLogger(__name__)

ARROW_COLOR = (255, 255, 255)
MIN_ARROW_PX = 0.5


@dataclass
class Arrow:
    x: float
    y: float
    dx: float
    dy: float

    @property
    def length(self) -> float:
        return math.hypot(self.dx, self.dy)


def field_arrows(shear: np.ndarray, stride: int, gain: float = 1.0, min_length: float = MIN_ARROW_PX) -> List[Arrow]:
    """Flechas submuestreadas cada `stride` píxeles, omitiendo las de longitud < `min_length`."""
    if stride < 1:
        raise ConfigError("stride debe ser >= 1")
    h, w, _ = shear.shape
    arrows = []
    for y in range(stride // 2, h, stride):
        for x in range(stride // 2, w, stride):
            u, v = shear[y, x]
            arrow = Arrow(float(x), float(y), float(u) * gain, float(v) * gain)
            if arrow.length >= min_length:
                arrows.append(arrow)
    return arrows


def normal_to_rgb(normal: np.ndarray, cmap: str = "viridis", vrange: Optional[Tuple[float, float]] = None) -> np.ndarray:
    """Mapa normal → imagen RGB uint8; un campo constante queda en el centro del colormap."""
    lo, hi = vrange if vrange is not None else (float(normal.min()), float(normal.max()))
    if hi - lo < 1e-12:
        scaled = np.full(normal.shape, 0.5)
    else:
        scaled = np.clip((normal - lo) / (hi - lo), 0.0, 1.0)
    rgba = colormaps[cmap](scaled)
    return (rgba[..., :3] * 255.0).round().astype(np.uint8)


def _draw_arrow(draw: ImageDraw.ImageDraw, arrow: Arrow, color: Tuple[int, int, int], width: int) -> None:
    x1, y1 = arrow.x + arrow.dx, arrow.y + arrow.dy
    draw.line([(arrow.x, arrow.y), (x1, y1)], fill=color, width=width)
    head = max(2.0, 0.3 * arrow.length)
    angle = math.atan2(arrow.dy, arrow.dx)
    for side in (-1, 1):
        a = angle + math.pi + side * math.pi / 6
        draw.line([(x1, y1), (x1 + head * math.cos(a), y1 + head * math.sin(a))], fill=color, width=width)


def render_field(
    fields: FieldPair,
    stride: int = 8,
    cmap: str = "viridis",
    gain: Optional[float] = None,
    scale: int = 1,
) -> Image.Image:
    """Imagen determinista del par de campos.

    `gain` escala la cizalla; por defecto se normaliza para que la flecha
    más larga mida `stride` píxeles.
    """
    if scale < 1:
        raise ConfigError("scale debe ser >= 1")
    rgb = normal_to_rgb(fields.normal_field, cmap)
    image = Image.fromarray(rgb)
    if scale > 1:
        image = image.resize((image.width * scale, image.height * scale), Image.NEAREST)
    if gain is None:
        peak = float(np.linalg.norm(fields.shear_field, axis=-1).max(initial=0.0))
        gain = stride / peak if peak > 1e-9 else 1.0
    draw = ImageDraw.Draw(image)
    arrows = field_arrows(fields.shear_field, stride, gain)
    for arrow in arrows:
        scaled = Arrow(arrow.x * scale, arrow.y * scale, arrow.dx * scale, arrow.dy * scale)
        _draw_arrow(draw, scaled, ARROW_COLOR, width=max(1, scale // 2))
    logger.debug("render_field: %d flechas (stride=%d)", len(arrows), stride)
    return image


def save_rendering(image: Image.Image, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image.save(path, format="PNG")
    return path
