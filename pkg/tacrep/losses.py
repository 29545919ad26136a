"""Pérdidas de preentrenamiento y diagnósticos asociados.

Convención: todas las pérdidas son medias por elemento (no sumas), de modo que
su magnitud no depende del tamaño de la configuración.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import torch
import torch.nn.functional as F

from .errors import ConfigError
from .masks import MaskSpec

PSNR_CAP_DB = 99.0
NORM_PIX_EPS = 1e-6


def normalize_patches(patches: torch.Tensor) -> torch.Tensor:
    """Estandarización por parche (media 0, varianza 1) de los píxeles objetivo."""
    mean = patches.mean(dim=-1, keepdim=True)
    var = patches.var(dim=-1, keepdim=True)
    return (patches - mean) / (var + NORM_PIX_EPS) ** 0.5


def mae_loss(reconstruction: torch.Tensor, target: torch.Tensor, mask: MaskSpec, norm_pix: bool = True) -> torch.Tensor:
    """MSE sobre los parches enmascarados; `reconstruction` y `target` son B×N×P."""
    if reconstruction.shape != target.shape:
        raise ConfigError(f"formas distintas: {tuple(reconstruction.shape)} vs {tuple(target.shape)}")
    if mask.masked_idx.size == 0:
        raise ConfigError("mae_loss con máscara vacía")
    idx = mask.masked().to(target.device)
    tgt = target[:, idx]
    if norm_pix:
        tgt = normalize_patches(tgt)
    return ((reconstruction[:, idx] - tgt) ** 2).mean()


@dataclass
class DinoHeadState:
    """Centro y temperaturas de la cabeza DINO."""

    n_prototypes: int
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    center_momentum: float = 0.9
    center: torch.Tensor = field(default=None)

    def __post_init__(self):
        if self.student_temp <= 0 or self.teacher_temp <= 0:
            raise ConfigError("las temperaturas DINO deben ser > 0")
        if not 0.0 <= self.center_momentum < 1.0:
            raise ConfigError("center_momentum debe estar en [0,1)")
        if self.center is None:
            self.center = torch.zeros(self.n_prototypes)


def _views(x: Union[torch.Tensor, Sequence[torch.Tensor]]) -> List[torch.Tensor]:
    return [x] if isinstance(x, torch.Tensor) else list(x)


def teacher_probs(teacher: torch.Tensor, head: DinoHeadState, teacher_temp: Optional[float] = None) -> torch.Tensor:
    temp = head.teacher_temp if teacher_temp is None else teacher_temp
    if temp <= 0:
        raise ConfigError("teacher_temp debe ser > 0")
    center = head.center.to(device=teacher.device, dtype=teacher.dtype)
    return F.softmax((teacher.detach() - center) / temp, dim=-1)


@torch.no_grad()
def update_center(head: DinoHeadState, teacher: Union[torch.Tensor, Sequence[torch.Tensor]]) -> None:
    batch_mean = torch.cat(_views(teacher), dim=0).mean(dim=0)
    m = head.center_momentum
    head.center = head.center.to(batch_mean) * m + batch_mean * (1.0 - m)


def dino_loss(
    student: Union[torch.Tensor, Sequence[torch.Tensor]],
    teacher: Union[torch.Tensor, Sequence[torch.Tensor]],
    head: DinoHeadState,
    teacher_temp: Optional[float] = None,
    update: bool = True,
) -> torch.Tensor:
    """−Σ p_t log p_s promediado sobre pares de vistas distintas (o un único par si se pasan tensores).

    Las vistas del profesor son las globales, que ocupan las primeras posiciones
    de la lista del estudiante.
    """
    if head.student_temp <= 0:
        raise ConfigError("student_temp debe ser > 0")
    s_views, t_views = _views(student), _views(teacher)
    if s_views[0].shape[-1] != t_views[0].shape[-1]:
        raise ConfigError("dimensiones K distintas entre estudiante y profesor")
    single = isinstance(student, torch.Tensor) and isinstance(teacher, torch.Tensor)
    total = student_terms = 0
    for ti, t in enumerate(t_views):
        p_t = teacher_probs(t, head, teacher_temp)
        for si, s in enumerate(s_views):
            if not single and si == ti:
                continue
            log_p_s = F.log_softmax(s / head.student_temp, dim=-1)
            total = total + (-(p_t * log_p_s).sum(dim=-1)).mean()
            student_terms += 1
    if student_terms == 0:
        raise ConfigError("dino_loss sin pares de vistas distintas")
    loss = total / student_terms
    if update:
        update_center(head, t_views)
    return loss


def jepa_loss(
    predicted: Union[torch.Tensor, Sequence[torch.Tensor]],
    target: Union[torch.Tensor, Sequence[torch.Tensor]],
) -> torch.Tensor:
    """Media sobre bloques de la MSE por elemento; los objetivos no llevan gradiente."""
    preds, tgts = _views(predicted), _views(target)
    if len(preds) != len(tgts) or not preds:
        raise ConfigError("predicciones y objetivos deben tener el mismo número de bloques")
    per_block = []
    for p, t in zip(preds, tgts):
        if p.shape != t.shape:
            raise ConfigError(f"bloque desalineado: {tuple(p.shape)} vs {tuple(t.shape)}")
        per_block.append(((p - t.detach()) ** 2).mean())
    return torch.stack(per_block).mean()


@dataclass
class CollapseReport:
    mean_entropy: float
    batch_mean_entropy: float
    diversity: float
    center_norm: float
    collapsed: bool


def _entropy(p: torch.Tensor) -> torch.Tensor:
    return -(p * torch.log(p.clamp_min(1e-12))).sum(dim=-1)


def detect_collapse(
    probs: torch.Tensor,
    center: Optional[torch.Tensor] = None,
    tolerance: float = 0.05,
) -> CollapseReport:
    """Colapso si H(media de p) − media de H(p) cae por debajo de `tolerance` (nats).

    Detecta tanto el colapso uniforme (todas las salidas planas) como el
    colapso a una sola clase (todas las salidas iguales y picudas).
    """
    probs = probs.detach().reshape(-1, probs.shape[-1])
    mean_h = float(_entropy(probs).mean())
    batch_h = float(_entropy(probs.mean(dim=0)))
    diversity = batch_h - mean_h
    return CollapseReport(
        mean_entropy=mean_h,
        batch_mean_entropy=batch_h,
        diversity=diversity,
        center_norm=float(center.norm()) if center is not None else 0.0,
        collapsed=diversity < tolerance,
    )


def psnr(prediction: torch.Tensor, target: torch.Tensor, data_range: float = 1.0, cap: float = PSNR_CAP_DB) -> float:
    """PSNR en dB con tope `cap` (también para MSE nulo)."""
    mse = float(((prediction.detach() - target.detach()) ** 2).mean())
    if mse <= 0.0:
        return cap
    return min(10.0 * math.log10(data_range**2 / mse), cap)
