import pytest
import torch
import torch.nn as nn

from tacrep.errors import ConfigError
from tacrep.schedules import (
    ScheduleConfig,
    apply_schedule,
    build_optimizer,
    lr_at,
    momentum_at,
    param_groups,
    teacher_temp_at,
    wd_at,
)


@pytest.fixture
def cfg():
    return ScheduleConfig(base_lr=1e-3, final_lr=0.0, warmup_epochs=2, total_epochs=10, wd_start=0.04, wd_end=0.4)


def test_lr_warmup_then_cosine(cfg):
    assert lr_at(0, cfg) == 0.0
    assert lr_at(1, cfg) == pytest.approx(5e-4)
    assert lr_at(2, cfg) == pytest.approx(1e-3)
    assert lr_at(6, cfg) == pytest.approx(5e-4)
    assert lr_at(10, cfg) == pytest.approx(0.0, abs=1e-12)
    assert lr_at(1000, cfg) == pytest.approx(0.0, abs=1e-12)


def test_wd_cosine_over_horizon(cfg):
    assert wd_at(0, cfg) == pytest.approx(0.04)
    assert wd_at(10, cfg) == pytest.approx(0.4)
    assert wd_at(5, cfg) == pytest.approx(0.22)


def test_teacher_temp_warmup():
    assert teacher_temp_at(0, 0.04, 0.02, 10) == pytest.approx(0.02)
    assert teacher_temp_at(5, 0.04, 0.02, 10) == pytest.approx(0.03)
    assert teacher_temp_at(50, 0.04, 0.02, 10) == 0.04
    assert teacher_temp_at(0, 0.04) == 0.04


def test_momentum_schedules():
    assert momentum_at(3, 0.996) == 0.996
    with pytest.raises(ConfigError):
        momentum_at(0, 0.9, "linear")


class _WithRegisters(nn.Module):
    def __init__(self):
        super().__init__()
        self.registers = nn.Parameter(torch.zeros(1, 2, 4))
        self.proj = nn.Linear(4, 4)
        self.norm = nn.LayerNorm(4)


def test_param_groups_exclude_registers_biases_and_norms():
    model = _WithRegisters()
    decay, no_decay = param_groups({"encoder": model})
    assert [p.shape for p in decay["params"]] == [model.proj.weight.shape]
    assert len(no_decay["params"]) == 4
    assert decay["apply_wd"] and not no_decay["apply_wd"]


def test_apply_schedule_sets_group_values(cfg):
    opt = build_optimizer({"encoder": _WithRegisters()}, cfg)
    lr, wd = apply_schedule(opt, 10, cfg)
    assert wd == pytest.approx(0.4)
    assert opt.param_groups[0]["weight_decay"] == pytest.approx(0.4)
    assert opt.param_groups[1]["weight_decay"] == 0.0
    assert all(g["lr"] == lr for g in opt.param_groups)


def test_build_optimizer_needs_trainable_params(cfg):
    frozen = nn.Linear(2, 2).requires_grad_(False)
    with pytest.raises(ConfigError):
        build_optimizer({"frozen": frozen}, cfg)


@pytest.mark.parametrize(
    "kwargs",
    [{"warmup_epochs": 20, "total_epochs": 10}, {"base_lr": 0.0}, {"wd_start": 0.5, "wd_end": 0.1}, {"grad_clip": 0.0}],
)
def test_invalid_schedule(kwargs):
    with pytest.raises(ConfigError):
        ScheduleConfig(**kwargs)


def test_step_counts():
    cfg = ScheduleConfig(warmup_epochs=3, total_epochs=10, steps_per_epoch=4)
    assert cfg.warmup_steps == 12
    assert cfg.total_steps == 40
