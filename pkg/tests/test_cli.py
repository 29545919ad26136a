import json

import pandas as pd
import pytest

import tacrep.harness as harness
from tacrep.cli import build_parser, main
from tacrep.errors import NumericalAbort


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "experiment.json"
    path.write_text(
        json.dumps(
            {
                "encoder_overrides": {"img_size": 28, "depth": 2},
                "schedule": {"batch_size": 4},
                "checkpoint_every": 1,
                "monitor_every": 1,
                "probe": {"epochs": 1, "batch_size": 16, "bootstrap": 10},
            }
        )
    )
    return path


def test_parser_requires_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_synth_gen_then_validate(tmp_path):
    out = tmp_path / "synth"
    assert main(["synth-gen", "--out", str(out), "--sequences", "2", "--frames", "6", "--seed", "3"]) == 0
    manifest = out / "manifest.json"
    assert len(json.loads(manifest.read_text())["sequences"]) == 2
    assert main(["validate-manifest", str(manifest)]) == 0
    (out / "seq_0001" / "labels.csv").unlink()
    assert main(["validate-manifest", str(manifest)]) == 2


def test_validate_manifest_writes_problems_with_out(tmp_path, manifest_path, config_file):
    out = tmp_path / "check"
    assert main(["validate-manifest", str(manifest_path), "--config", str(config_file), "--seed", "5", "--out", str(out)]) == 0
    clean = json.loads((out / "manifest_problems.json").read_text())
    assert clean["problems"] == [] and clean["sequences"] == 4
    assert main(["validate-manifest", str(manifest_path), "--config", str(tmp_path / "missing.json")]) == 2


def test_pretrain_command(tmp_path, manifest_path, config_file):
    out = tmp_path / "run"
    code = main(["pretrain", "--config", str(config_file), "--data", str(manifest_path), "--out", str(out), "--steps", "2"])
    assert code == 0
    assert (out / "checkpoints" / "ckpt_000002.pt").is_file()
    assert len(pd.read_csv(out / "metrics.csv")) == 2


def test_pretrain_abort_exit_code(tmp_path, manifest_path, config_file, monkeypatch):
    def explode(*args, **kwargs):
        raise NumericalAbort("pérdida no finita", dump={"step": 0})

    monkeypatch.setattr(harness, "pretrain", explode)
    code = main(["pretrain", "--config", str(config_file), "--data", str(manifest_path), "--out", str(tmp_path / "run")])
    assert code == 3


def test_probe_train_evaluate_report(tmp_path, manifest_path, config_file):
    out = tmp_path / "probes"
    common = ["--config", str(config_file), "--out", str(out)]
    assert main(["probe-train", *common, "--task", "T2", "--data", str(manifest_path), "--e2e"]) == 0
    probe = out / "probe_T2_e2e_full_1_s0.pt"
    assert probe.is_file()
    assert main(["evaluate", "--probe", str(probe)]) == 0
    results = pd.read_csv(out / "bench_results.csv")
    assert results["task"].tolist() == ["T2"]
    assert results["model"].tolist() == ["e2e"]
    # evaluación sobre la secuencia de test (4 secuencias de 12 frames)
    assert results["n_eval"].tolist() == [12]
    assert main(["report", str(out / "bench_results.csv")]) == 0
    assert (out / "summary.csv").is_file()
    assert (out / "T2_budget.png").is_file()
    elsewhere = tmp_path / "report"
    assert main(["report", str(out / "bench_results.csv"), "--config", str(config_file), "--seed", "1", "--out", str(elsewhere)]) == 0
    assert (elsewhere / "summary.csv").is_file()


def test_probe_train_needs_checkpoint(tmp_path, manifest_path, config_file):
    code = main(["probe-train", "--config", str(config_file), "--out", str(tmp_path), "--task", "T1", "--data", str(manifest_path)])
    assert code == 2


def test_configuration_errors_exit_with_two(tmp_path, config_file):
    assert main(["pretrain", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 2
    assert main(["pretrain", "--config", str(config_file), "--data", str(tmp_path / "nada.json"), "--out", str(tmp_path)]) == 2
    assert main(["pretrain", "--config", str(config_file), "--objective", "SIMCLR", "--out", str(tmp_path)]) == 2
    assert main(["watch", str(tmp_path / "no_run")]) == 2


def test_watch_takes_run_dir_from_out_or_config(tmp_path, config_file, monkeypatch):
    from tacrep.app import RunMonitorApp

    seen = []
    monkeypatch.setattr(RunMonitorApp, "run", lambda self: seen.append(self.run_dir))
    run = tmp_path / "run"
    run.mkdir()
    assert main(["watch", "--out", str(run), "--seed", "2"]) == 0
    assert main(["watch", str(run), "--config", str(config_file)]) == 0
    assert seen == [run, run]
    assert main(["watch"]) == 2
    assert main(["watch", "--out", str(tmp_path / "no_run")]) == 2
