import json

import pytest

from tacrep.config import (
    ExperimentConfig,
    experiment_from_dict,
    load_experiment,
    load_synth_config,
    read_json,
)
from tacrep.encoder import TokenMode
from tacrep.errors import ConfigError
from tacrep.objectives import Objective
from tacrep.probe import ProbeConfig


def test_defaults_apply_tiny_head_preset():
    cfg = experiment_from_dict({})
    assert cfg.objective.objective is Objective.MAE
    assert cfg.objective.decoder_dim == 64
    assert cfg.encoder_config().embed_dim == 64
    assert cfg.seed == 0
    assert cfg.tasks == ["T1", "T2", "T3", "T4", "T5"]


def test_objective_as_string_and_vjepa_switches_mode():
    cfg = experiment_from_dict({"objective": "VJEPA"})
    assert cfg.objective.objective is Objective.VJEPA
    assert cfg.objective.predictor_dim == 32
    assert cfg.encoder_config().mode is TokenMode.CLIP


def test_schedule_measured_in_steps():
    cfg = experiment_from_dict({"steps": 200})
    sched = cfg.schedule_config()
    assert (sched.total_steps, sched.warmup_steps) == (200, 20)
    assert sched.base_lr == 1e-4
    custom = experiment_from_dict({"objective": "IJEPA", "schedule": {"base_lr": 1e-3}})
    assert custom.schedule_config().base_lr == 1e-3
    with pytest.raises(ConfigError):
        experiment_from_dict({"schedule": {"lr_peak": 1.0}}).schedule_config()


@pytest.mark.parametrize(
    "raw",
    [
        {"colour": "red"},
        {"budgets": [0.0]},
        {"seeds": []},
        {"test_fraction": 1.0},
        {"objective": {"objective": "MAE", "bogus": 1}},
        {"probe": {"epochs": 0}},
        {"objective": "SIMCLR"},
        {"tasks": ["T9"]},
        {"tunings": ["mitad"]},
    ],
)
def test_invalid_experiments(raw):
    with pytest.raises(ConfigError):
        experiment_from_dict(raw)


def test_hash_tracks_content():
    a = experiment_from_dict({"seeds": [0, 1]})
    b = experiment_from_dict({"seeds": [0, 1]})
    c = experiment_from_dict({"seeds": [0, 2]})
    assert a.hash() == b.hash() != c.hash()
    json.dumps(a.to_dict())
    assert isinstance(a.probe, ProbeConfig)


def test_load_experiment_with_overrides(tmp_path):
    path = tmp_path / "exp.json"
    path.write_text(json.dumps({"objective": {"objective": "MAE", "mask_ratio": 0.5}, "steps": 10, "out_dir": "runs/x"}))
    cfg = load_experiment(path, objective="DINO", steps=None, out_dir=str(tmp_path / "out"))
    assert cfg.objective.objective is Objective.DINO
    assert cfg.objective.mask_ratio == 0.5
    assert cfg.steps == 10
    assert cfg.out_path == tmp_path / "out"


def test_read_json_errors(tmp_path):
    with pytest.raises(ConfigError):
        read_json(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{oops")
    with pytest.raises(ConfigError):
        read_json(bad)
    bad.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        read_json(bad)


def test_check_files(tmp_path):
    present = tmp_path / "manifest.json"
    present.write_text("{}")
    cfg = ExperimentConfig(data=[str(present)], eval_data=[str(tmp_path / "nope.json")])
    problems = cfg.check_files()
    assert len(problems) == 1 and "nope.json" in problems[0]


def test_load_synth_config(tmp_path):
    path = tmp_path / "synth.json"
    path.write_text(json.dumps({"n_sequences": 3, "image_size": [32, 40]}))
    cfg = load_synth_config(path, seed=5, friction_mu=None)
    assert (cfg.n_sequences, cfg.image_size, cfg.seed, cfg.friction_mu) == (3, (32, 40), 5, 0.8)
    with pytest.raises(ConfigError):
        load_synth_config(None, n_sequences="many")
