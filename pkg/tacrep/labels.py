"""Etiquetadores de TacBench: fuerza normalizada, cono de fricción y bins de pose."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError

logger = logging.getLogger(__name__)

POSE_DOFS: Tuple[str, ...] = ("dx_mm", "dy_mm", "dtheta_deg")


@dataclass
class ForceLabel:
    """Fuerza en 3 ejes (N); fz es la componente normal."""

    fx: float
    fy: float
    fz: float
    normalized: bool = False

    def __post_init__(self):
        if self.normalized and max(abs(self.fx), abs(self.fy), abs(self.fz)) > 1.0 + 1e-12:
            raise ConfigError("una fuerza normalizada debe cumplir |f| <= 1 por eje")

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.fz], dtype=np.float64)

    @property
    def tangential(self) -> float:
        return math.hypot(self.fx, self.fy)


class SlipState(IntEnum):
    NO_SLIP = 0
    SLIP = 1


@dataclass
class SlipLabel:
    state: SlipState
    delta_force: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.delta_force = np.asarray(self.delta_force, dtype=np.float64)
        if not np.all(np.isfinite(self.delta_force)):
            raise ConfigError("delta_force debe ser finito")


@dataclass
class PoseDelta:
    dx: float
    dy: float
    dtheta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dtheta], dtype=np.float64)


@dataclass
class PoseClass:
    dx: int
    dy: int
    dtheta: int

    def __post_init__(self):
        for c in (self.dx, self.dy, self.dtheta):
            if not 0 <= c < 11:
                raise ConfigError(f"clase de pose fuera de rango: {c}")


GRASP_MIN_NORMAL_N = 1.0
GRASP_CONE_MARGIN = 0.5


@dataclass
class GraspOutcome:
    success: bool

    @classmethod
    def from_force(cls, force: ForceLabel, mu: float, min_normal: float = GRASP_MIN_NORMAL_N, margin: float = GRASP_CONE_MARGIN) -> "GraspOutcome":
        """Agarre estable: contacto firme y |F_t| dentro de `margin` veces el cono de fricción."""
        fn = abs(force.fz)
        return cls(success=fn >= min_normal and force.tangential <= margin * mu * fn)


@dataclass
class TextileClass:
    textile_id: int
    n_classes: int = 20

    def __post_init__(self):
        if not 0 <= self.textile_id < self.n_classes:
            raise ConfigError(f"textile_id {self.textile_id} fuera de [0, {self.n_classes})")


# ---------------------------------------------------------------------------
# Fuerza

def normalize_force(f: ForceLabel, fmax: Sequence[float]) -> ForceLabel:
    """f/fmax por eje en [-1,1]; los valores fuera de rango se recortan con aviso."""
    fmax_arr = np.asarray(fmax, dtype=np.float64)
    if fmax_arr.shape != (3,) or np.any(fmax_arr <= 0):
        raise ConfigError("fmax debe tener 3 componentes positivas")
    scaled = f.as_array() / fmax_arr
    if np.any(np.abs(scaled) > 1.0):
        logger.warning("fuerza %s fuera de fmax %s; se recorta a [-1,1]", f.as_array(), fmax_arr)
        scaled = np.clip(scaled, -1.0, 1.0)
    return ForceLabel(*scaled.tolist(), normalized=True)


def denormalize_force(f: ForceLabel, fmax: Sequence[float]) -> ForceLabel:
    fmax_arr = np.asarray(fmax, dtype=np.float64)
    values = f.as_array() * fmax_arr
    return ForceLabel(*values.tolist(), normalized=False)


def normalize_forces(forces: np.ndarray, fmax: Sequence[float]) -> np.ndarray:
    """Versión vectorizada de `normalize_force` para arrays n×3."""
    fmax_arr = np.asarray(fmax, dtype=np.float64)
    scaled = np.asarray(forces, dtype=np.float64) / fmax_arr
    if np.any(np.abs(scaled) > 1.0):
        logger.warning("%d componentes de fuerza fuera de fmax; se recortan", int(np.sum(np.abs(scaled) > 1.0)))
    return np.clip(scaled, -1.0, 1.0)


# ---------------------------------------------------------------------------
# Deslizamiento

def label_slip(force: ForceLabel, mu: float) -> SlipState:
    """Deslizamiento si |F_t| > mu·|F_n|; la igualdad (borde del cono) es no_slip."""
    if mu <= 0:
        raise ConfigError("mu debe ser > 0")
    return SlipState.SLIP if force.tangential > mu * abs(force.fz) else SlipState.NO_SLIP


def label_slip_array(forces: np.ndarray, mu: float) -> np.ndarray:
    """`label_slip` fila a fila sobre un array n×3."""
    forces = np.asarray(forces, dtype=np.float64)
    return np.array([int(label_slip(ForceLabel(*row), mu)) for row in forces], dtype=np.int64)


def grasp_stable_array(forces: np.ndarray, mu: float, min_normal: float = GRASP_MIN_NORMAL_N, margin: float = GRASP_CONE_MARGIN) -> np.ndarray:
    forces = np.asarray(forces, dtype=np.float64)
    fn = np.abs(forces[:, 2])
    ft = np.hypot(forces[:, 0], forces[:, 1])
    return ((fn >= min_normal) & (ft <= margin * mu * fn)).astype(np.int64)


def detect_slip_onsets(tangential: Sequence[float], commanded_motion: Sequence[bool]) -> np.ndarray:
    """Primer instante de cada tramo de movimiento en que la fuerza tangencial deja de crecer."""
    tangential = np.asarray(tangential, dtype=np.float64)
    moving = np.asarray(commanded_motion, dtype=bool)
    onsets = np.zeros(tangential.shape[0], dtype=bool)
    armed = True
    for i in range(tangential.shape[0] - 1):
        if not moving[i]:
            armed = True
            continue
        if armed and moving[i + 1] and tangential[i + 1] <= tangential[i] and tangential[i] > 0:
            onsets[i] = True
            armed = False
    return onsets


def estimate_friction_coefficient(forces: Sequence[ForceLabel], onsets: Sequence[bool]) -> float:
    """Ajuste por mínimos cuadrados de |F_t| = mu·|F_n| sobre los instantes de inicio de deslizamiento."""
    mask = np.asarray(onsets, dtype=bool)
    if mask.shape[0] != len(forces):
        raise ConfigError("onsets y forces deben tener la misma longitud")
    if not mask.any():
        raise ConfigError("no hay muestras de inicio de deslizamiento para estimar mu")
    ft = np.array([forces[i].tangential for i in np.flatnonzero(mask)])
    fn = np.array([abs(forces[i].fz) for i in np.flatnonzero(mask)])
    denom = float(np.dot(fn, fn))
    if denom == 0.0:
        raise ConfigError("fuerza normal nula en todos los inicios")
    mu = float(np.dot(ft, fn) / denom)
    if mu <= 0:
        raise ConfigError(f"mu estimado no positivo ({mu})")
    return mu


# ---------------------------------------------------------------------------
# Pose (regresión por clasificación)

@dataclass
class BinningSpec:
    """Bins log-uniformes espejados alrededor de 0 para un grado de libertad.

    `range_limit` es el extremo del rango de movimiento (±5 mm, ±2°), no la
    resolución más fina; los valores de fuera se recortan al bin extremo.
    """

    range_limit: float
    n_bins: int = 11
    inner_fraction: float = 0.02

    def __post_init__(self):
        if self.range_limit <= 0:
            raise ConfigError("range_limit debe ser > 0")
        if self.n_bins < 3 or self.n_bins % 2 == 0:
            raise ConfigError("n_bins debe ser impar y >= 3")
        if not 0 < self.inner_fraction < 1:
            raise ConfigError("inner_fraction debe estar en (0,1)")


DEFAULT_BINNING: Dict[str, BinningSpec] = {
    "dx_mm": BinningSpec(range_limit=5.0),
    "dy_mm": BinningSpec(range_limit=5.0),
    "dtheta_deg": BinningSpec(range_limit=2.0),
}


def make_pose_bins(spec: BinningSpec) -> np.ndarray:
    """Bordes de los n_bins intervalos: simétricos, estrictamente crecientes, de -L a +L."""
    per_side = spec.n_bins // 2
    inner = spec.inner_fraction * spec.range_limit
    positive = inner * (spec.range_limit / inner) ** (np.arange(per_side + 1) / per_side)
    positive[-1] = spec.range_limit
    return np.concatenate([-positive[::-1], positive])


def pose_to_class(delta: float, spec: BinningSpec) -> int:
    edges = make_pose_bins(spec)
    value = min(max(float(delta), -spec.range_limit), spec.range_limit)
    return int(np.searchsorted(edges[1:-1], value, side="right"))


def poses_to_classes(values: np.ndarray, spec: BinningSpec) -> np.ndarray:
    edges = make_pose_bins(spec)
    clipped = np.clip(np.asarray(values, dtype=np.float64), -spec.range_limit, spec.range_limit)
    return np.searchsorted(edges[1:-1], clipped, side="right").astype(np.int64)


def class_to_pose(c: int, spec: BinningSpec) -> float:
    """Punto medio geométrico del bin; 0 para el bin central."""
    if not 0 <= c < spec.n_bins:
        raise ConfigError(f"clase {c} fuera de [0, {spec.n_bins})")
    center = spec.n_bins // 2
    if c == center:
        return 0.0
    edges = make_pose_bins(spec)
    lo, hi = abs(edges[c]), abs(edges[c + 1])
    mid = math.sqrt(lo * hi)
    return mid if c > center else -mid


def pose_delta_to_class(delta: PoseDelta, binning: Optional[Dict[str, BinningSpec]] = None) -> PoseClass:
    binning = binning or DEFAULT_BINNING
    values = delta.as_array()
    return PoseClass(*[pose_to_class(v, binning[k]) for v, k in zip(values, POSE_DOFS)])


def decode_pose_logits(logits: np.ndarray) -> np.ndarray:
    """Argmax con desempate hacia el índice de clase más bajo."""
    return np.argmax(np.asarray(logits), axis=-1)


def pose_class_names(spec: BinningSpec) -> List[str]:
    edges = make_pose_bins(spec)
    return [f"[{edges[i]:.3g}, {edges[i + 1]:.3g})" for i in range(spec.n_bins)]
