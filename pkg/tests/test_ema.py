import pytest
import torch
import torch.nn as nn

from tacrep.ema import EMAState, ema_update
from tacrep.errors import ConfigError


def test_ema_update_is_elementwise_average():
    student = nn.Linear(3, 2)
    ema = EMAState.from_student(student, momentum=0.5)
    assert all(not p.requires_grad for p in ema.teacher.parameters())
    before = ema.teacher.weight.detach().clone()
    with torch.no_grad():
        student.weight.add_(1.0)
    ema_update(student, ema)
    torch.testing.assert_close(ema.teacher.weight, 0.5 * before + 0.5 * student.weight.detach())
    assert student.weight.requires_grad


def test_ema_rejects_incongruent_trees():
    ema = EMAState.from_student(nn.Linear(3, 2), momentum=0.9)
    with pytest.raises(ConfigError):
        ema_update(nn.Linear(3, 4), ema)
    with pytest.raises(ConfigError):
        ema_update(nn.Sequential(nn.Linear(3, 2)), ema)


def test_ema_copies_buffers():
    student = nn.BatchNorm1d(2)
    ema = EMAState.from_student(student, momentum=0.9)
    student.running_mean.fill_(3.0)
    ema_update(student, ema)
    torch.testing.assert_close(ema.teacher.running_mean, torch.full((2,), 3.0))


def test_cosine_momentum_reaches_one():
    ema = EMAState.from_student(nn.Linear(1, 1), momentum=0.99, schedule="cosine", total_steps=10)
    assert ema.momentum_at(0) == pytest.approx(0.99)
    assert ema.momentum_at(10) == pytest.approx(1.0)
    assert 0.99 < ema.momentum_at(5) < 1.0


@pytest.mark.parametrize("kwargs", [{"momentum": 1.0}, {"momentum": 0.0}, {"momentum": 0.9, "schedule": "step"}])
def test_invalid_ema_config(kwargs):
    with pytest.raises(ConfigError):
        EMAState.from_student(nn.Linear(1, 1), **kwargs)
