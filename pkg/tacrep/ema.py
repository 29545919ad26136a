"""Profesor EMA: copia del estudiante que solo se mueve por media exponencial."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from typing import Dict

import torch
import torch.nn as nn

from .errors import ConfigError
from .schedules import momentum_at

logger = logging.getLogger(__name__)


@dataclass
class EMAState:
    teacher: nn.Module
    momentum: float = 0.996
    schedule: str = "constant"
    total_steps: int = 1

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ConfigError(f"momentum debe estar en (0,1), recibido {self.momentum}")
        momentum_at(0, self.momentum, self.schedule, self.total_steps)
        self.teacher.requires_grad_(False)
        self.teacher.eval()

    @classmethod
    def from_student(cls, student: nn.Module, momentum: float = 0.996, schedule: str = "constant", total_steps: int = 1) -> "EMAState":
        return cls(teacher=copy.deepcopy(student), momentum=momentum, schedule=schedule, total_steps=total_steps)

    def momentum_at(self, step: int) -> float:
        return momentum_at(step, self.momentum, self.schedule, self.total_steps)


def _named(module: nn.Module) -> Dict[str, torch.Tensor]:
    return dict(module.named_parameters())


@torch.no_grad()
def ema_update(student: nn.Module, ema: EMAState, step: int = 0) -> EMAState:
    """teacher ← m·teacher + (1−m)·student, elemento a elemento; los buffers se copian."""
    t_params, s_params = _named(ema.teacher), _named(student)
    if t_params.keys() != s_params.keys():
        missing = sorted(set(t_params) ^ set(s_params))
        raise ConfigError(f"árboles de parámetros no congruentes: {missing[:5]}")
    for name, t in t_params.items():
        s = s_params[name]
        if t.shape != s.shape:
            raise ConfigError(f"forma distinta en {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
    m = ema.momentum_at(step)
    for name, t in t_params.items():
        t.mul_(m).add_(s_params[name].detach().to(t.dtype), alpha=1.0 - m)
    for (_, tb), (_, sb) in zip(ema.teacher.named_buffers(), student.named_buffers()):
        tb.copy_(sb)
    return ema
