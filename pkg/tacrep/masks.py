"""Muestreadores de máscaras: aleatoria (MAE), por bloques (I-JEPA) y en tubo (V-JEPA).

Todas devuelven un `MaskSpec` cuya partición visible/enmascarado cubre 0..N−1
sin solapes. La máscara se comparte por todo el lote.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
import torch

from .errors import ConfigError


class MaskKind(str, Enum):
    RANDOM = "random"
    BLOCK = "block"
    TUBE = "tube"


@dataclass
class MaskSpec:
    visible_idx: np.ndarray
    masked_idx: np.ndarray
    kind: MaskKind
    n_tokens: int
    params: Dict[str, Any] = field(default_factory=dict)
    blocks: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.kind = MaskKind(self.kind)
        self.visible_idx = np.sort(np.asarray(self.visible_idx, dtype=np.int64))
        self.masked_idx = np.sort(np.asarray(self.masked_idx, dtype=np.int64))
        joined = np.concatenate([self.visible_idx, self.masked_idx])
        if joined.size != self.n_tokens or not np.array_equal(np.sort(joined), np.arange(self.n_tokens)):
            raise ConfigError("visible y masked deben particionar 0..N−1")
        if not self.blocks:
            self.blocks = [self.masked_idx]

    def visible(self) -> torch.Tensor:
        return torch.from_numpy(self.visible_idx)

    def masked(self) -> torch.Tensor:
        return torch.from_numpy(self.masked_idx)

    @property
    def ratio(self) -> float:
        return self.masked_idx.size / self.n_tokens


def sample_random_mask(n_tokens: int, ratio: float, rng: np.random.Generator) -> MaskSpec:
    """⌊ratio·N⌋ índices enmascarados uniformemente al azar."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"ratio debe estar en (0,1), recibido {ratio}")
    n_masked = int(math.floor(ratio * n_tokens))
    if n_masked == 0 or n_masked == n_tokens:
        raise ConfigError(f"ratio {ratio} con N={n_tokens} deja 0 visibles o 0 enmascarados")
    perm = rng.permutation(n_tokens)
    return MaskSpec(
        visible_idx=perm[n_masked:],
        masked_idx=perm[:n_masked],
        kind=MaskKind.RANDOM,
        n_tokens=n_tokens,
        params={"ratio": ratio},
    )


def _log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    if lo == hi:
        return float(lo)
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


def _sample_rect(
    gh: int,
    gw: int,
    scale_range: Tuple[float, float],
    aspect_range: Tuple[float, float],
    rng: np.random.Generator,
) -> Tuple[int, int, int, int]:
    lo, hi = scale_range
    scale = float(lo) if lo == hi else float(rng.uniform(lo, hi))
    aspect = _log_uniform(rng, *aspect_range)
    area = scale * gh * gw
    h = min(max(int(round(math.sqrt(area * aspect))), 1), gh)
    w = min(max(int(round(math.sqrt(area / aspect))), 1), gw)
    top = int(rng.integers(0, gh - h + 1))
    left = int(rng.integers(0, gw - w + 1))
    return top, left, h, w


def _rect_indices(top: int, left: int, h: int, w: int, gw: int) -> np.ndarray:
    rows = np.arange(top, top + h)[:, None]
    cols = np.arange(left, left + w)[None, :]
    return (rows * gw + cols).ravel()


def sample_block_mask(
    grid: Sequence[int],
    n_targets: int = 4,
    scale_range: Tuple[float, float] = (0.15, 0.2),
    aspect_range: Tuple[float, float] = (0.75, 1.5),
    rng: np.random.Generator = None,
    context_scale: Tuple[float, float] = (1.0, 1.0),
) -> MaskSpec:
    """Bloques rectangulares objetivo; el contexto es su complemento (o un bloque de contexto menos los objetivos).

    `blocks` conserva cada bloque objetivo por separado; los tokens fuera del
    contexto que no son objetivo también cuentan como enmascarados.
    """
    if rng is None:
        raise ConfigError("sample_block_mask necesita un generador")
    if len(grid) != 2 or min(grid) < 1:
        raise ConfigError(f"rejilla degenerada: {grid}")
    if n_targets < 1:
        raise ConfigError("n_targets debe ser >= 1")
    gh, gw = int(grid[0]), int(grid[1])
    n = gh * gw
    rects = [_sample_rect(gh, gw, scale_range, aspect_range, rng) for _ in range(n_targets)]
    blocks = [_rect_indices(*r, gw) for r in rects]
    target = np.zeros(n, dtype=bool)
    for b in blocks:
        target[b] = True
    if context_scale[1] < 1.0 or context_scale[0] < 1.0:
        context = np.zeros(n, dtype=bool)
        context[_rect_indices(*_sample_rect(gh, gw, context_scale, (1.0, 1.0), rng), gw)] = True
    else:
        context = np.ones(n, dtype=bool)
    context &= ~target
    if not context.any():
        raise ConfigError("todos los tokens quedan enmascarados: contexto vacío")
    return MaskSpec(
        visible_idx=np.flatnonzero(context),
        masked_idx=np.flatnonzero(~context),
        kind=MaskKind.BLOCK,
        n_tokens=n,
        params={
            "n_targets": n_targets,
            "scale_range": tuple(scale_range),
            "aspect_range": tuple(aspect_range),
            "context_scale": tuple(context_scale),
            "rects": rects,
        },
        blocks=[np.sort(b) for b in blocks],
    )


def sample_tube_mask(
    grid: Sequence[int],
    ratio: float = 0.15,
    aspect_range: Tuple[float, float] = (0.75, 1.5),
    rng: np.random.Generator = None,
    n_blocks: int = 8,
) -> MaskSpec:
    """Máscara espacial por bloques (escala `ratio` por bloque) replicada en los gt cortes temporales."""
    if len(grid) != 3 or grid[0] < 1:
        raise ConfigError(f"la máscara en tubo necesita una rejilla (gt,gh,gw), recibido {grid}")
    gt, gh, gw = (int(g) for g in grid)
    spatial = sample_block_mask((gh, gw), n_blocks, (ratio, ratio), aspect_range, rng)
    plane = gh * gw
    offsets = np.arange(gt)[:, None] * plane

    def tube(idx: np.ndarray) -> np.ndarray:
        return (offsets + idx[None, :]).ravel()

    return MaskSpec(
        visible_idx=tube(spatial.visible_idx),
        masked_idx=tube(spatial.masked_idx),
        kind=MaskKind.TUBE,
        n_tokens=gt * plane,
        params={"ratio": ratio, "aspect_range": tuple(aspect_range), "n_blocks": n_blocks, "spatial": spatial.params},
        blocks=[np.sort(tube(b)) for b in spatial.blocks],
    )
