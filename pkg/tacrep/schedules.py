"""Calendarios de entrenamiento: lr, weight decay, momento EMA y temperatura del profesor.

Todos son funciones puras del paso; el optimizador se actualiza con
`apply_schedule` antes de cada paso.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Tuple

import torch
import torch.nn as nn

from .errors import ConfigError

NO_DECAY_KEYWORDS: Tuple[str, ...] = ("registers", "mask_token", "query", "center")


@dataclass
class ScheduleConfig:
    base_lr: float = 1e-4
    final_lr: float = 1e-6
    warmup_epochs: int = 30
    total_epochs: int = 150
    steps_per_epoch: int = 1
    wd_start: float = 0.04
    wd_end: float = 0.4
    batch_size: int = 100
    betas: Tuple[float, float] = (0.9, 0.95)
    grad_clip: float = 1.0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.base_lr <= 0 or self.final_lr < 0:
            raise ConfigError("base_lr debe ser > 0 y final_lr >= 0")
        if not 0 <= self.warmup_epochs <= self.total_epochs or self.total_epochs < 1:
            raise ConfigError(f"warmup ({self.warmup_epochs}) debe estar entre 0 y total ({self.total_epochs})")
        if self.wd_start > self.wd_end:
            raise ConfigError("wd_start no puede superar wd_end")
        if self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ConfigError("steps_per_epoch y batch_size deben ser >= 1")
        if self.grad_clip <= 0:
            raise ConfigError("grad_clip debe ser > 0")

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """Rampa lineal 0→base durante el warmup y coseno base→final después; fuera de horizonte se fija al final."""
    step = max(int(step), 0)
    warm = cfg.warmup_steps
    if step < warm:
        return cfg.base_lr * step / warm
    span = cfg.total_steps - warm
    progress = 1.0 if span <= 0 else min((step - warm) / span, 1.0)
    return cfg.final_lr + 0.5 * (cfg.base_lr - cfg.final_lr) * (1.0 + math.cos(math.pi * progress))


def wd_at(step: int, cfg: ScheduleConfig) -> float:
    """Coseno wd_start→wd_end sobre todo el horizonte."""
    progress = min(max(int(step), 0) / cfg.total_steps, 1.0)
    return cfg.wd_end + 0.5 * (cfg.wd_start - cfg.wd_end) * (1.0 + math.cos(math.pi * progress))


def momentum_at(step: int, base: float, schedule: str = "constant", total_steps: int = 1) -> float:
    """Momento EMA: constante, o coseno de `base` hasta 1.0."""
    if schedule == "constant":
        return base
    if schedule == "cosine":
        progress = min(max(step, 0) / max(total_steps, 1), 1.0)
        return 1.0 - (1.0 - base) * (math.cos(math.pi * progress) + 1.0) / 2.0
    raise ConfigError(f"calendario de momento desconocido: {schedule}")


def teacher_temp_at(step: int, final: float = 0.04, warmup_from: float = 0.02, warmup_steps: int = 0) -> float:
    if warmup_steps <= 0 or step >= warmup_steps:
        return final
    return warmup_from + (final - warmup_from) * max(step, 0) / warmup_steps


def _skip_decay(name: str, param: torch.Tensor) -> bool:
    return param.ndim <= 1 or any(k in name for k in NO_DECAY_KEYWORDS)


def param_groups(modules: Dict[str, nn.Module]) -> List[Dict[str, object]]:
    """Dos grupos AdamW: con decay y sin decay (sesgos, normas, registros, mask tokens)."""
    decay: List[torch.Tensor] = []
    no_decay: List[torch.Tensor] = []
    for prefix, module in modules.items():
        for name, p in module.named_parameters():
            if not p.requires_grad:
                continue
            (no_decay if _skip_decay(f"{prefix}.{name}", p) else decay).append(p)
    return [
        {"params": decay, "weight_decay": 0.0, "apply_wd": True},
        {"params": no_decay, "weight_decay": 0.0, "apply_wd": False},
    ]


def build_optimizer(modules: Dict[str, nn.Module], cfg: ScheduleConfig) -> torch.optim.AdamW:
    groups = [g for g in param_groups(modules) if g["params"]]
    if not groups:
        raise ConfigError("no hay parámetros entrenables")
    return torch.optim.AdamW(groups, lr=cfg.base_lr, betas=cfg.betas, weight_decay=0.0)


def apply_schedule(optimizer: torch.optim.Optimizer, step: int, cfg: ScheduleConfig) -> Tuple[float, float]:
    lr, wd = lr_at(step, cfg), wd_at(step, cfg)
    for group in optimizer.param_groups:
        group["lr"] = lr
        group["weight_decay"] = wd if group.get("apply_wd", True) else 0.0
    return lr, wd


def trainable(params: Iterable[torch.Tensor]) -> List[torch.Tensor]:
    return [p for p in params if p.requires_grad]
