import numpy as np
import pytest
import torch

from tacrep.encoder import ViTEncoder
from tacrep.errors import ConfigError, FreezeViolation
from tacrep.probe import (
    ProbeConfig,
    assert_frozen,
    budget_indices,
    evaluate,
    n_shot_adapt,
    predict,
    set_tuning,
    split_by_sequence,
    task_loss,
    train_probe,
    window_batch,
)
from tacrep.tasks import Tuning, get_task


@pytest.fixture
def probe_cfg():
    return ProbeConfig(lr=1e-3, epochs=2, batch_size=16, val_fraction=0.25, bootstrap=20)


@pytest.fixture
def encoder(tiny_cfg):
    torch.manual_seed(0)
    return ViTEncoder(tiny_cfg)


def _snapshot(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def test_budget_indices_nested_and_stratified():
    big = budget_indices(40, 0.5, seed=1)
    small = budget_indices(40, 0.1, seed=1)
    assert big.size == 20 and small.size == 4
    assert set(small) <= set(big)
    np.testing.assert_array_equal(budget_indices(5, 1.0, seed=0), np.arange(5))
    strata = np.repeat([0, 1], [30, 10])
    picked = budget_indices(40, 0.5, seed=0, strata=strata)
    assert (strata[picked] == 0).sum() == 15 and (strata[picked] == 1).sum() == 5
    with pytest.raises(ConfigError):
        budget_indices(10, 0.0, seed=0)
    with pytest.raises(ConfigError):
        budget_indices(0, 0.5, seed=0)


def test_split_by_sequence_is_disjoint(bank):
    train, test = split_by_sequence(bank, 0.25, seed=0)
    assert train.size == 36 and test.size == 12
    train_seqs = {bank.index[i][0] for i in train}
    test_seqs = {bank.index[i][0] for i in test}
    assert not train_seqs & test_seqs
    with pytest.raises(ConfigError):
        split_by_sequence(bank, 1.0, seed=0)


def test_window_batch_resizes(bank):
    assert tuple(window_batch(bank, [0, 1], 14).shape) == (2, 6, 14, 14)
    assert tuple(window_batch(bank, [0], 28).shape) == (1, 6, 28, 28)


def test_set_tuning_modes(encoder):
    assert set_tuning(encoder, "frozen") == []
    partial = set_tuning(encoder, Tuning.PARTIAL)
    assert {id(p) for p in partial} == {id(p) for p in encoder.blocks[-1].parameters()}
    assert len(set_tuning(encoder, "full")) == len(list(encoder.parameters()))


def test_assert_frozen_detects_gradients(encoder):
    assert_frozen(encoder)
    encoder.patch_embed.weight.grad = torch.ones_like(encoder.patch_embed.weight)
    with pytest.raises(FreezeViolation):
        assert_frozen(encoder)


def test_task_loss_sums_heads():
    spec = get_task("T2")
    outputs = {"slip": torch.tensor([[10.0, -10.0]]), "delta_force": torch.tensor([[1.0, 0.0, 0.0]])}
    targets = {"slip": torch.tensor([0]), "delta_force": torch.zeros(1, 3)}
    assert float(task_loss(spec, outputs, targets)) == pytest.approx(1.0 / 3.0, abs=1e-6)


def test_frozen_probe_leaves_encoder_untouched(bank, encoder, probe_cfg):
    before = _snapshot(encoder)
    trained = train_probe("T1", encoder, "frozen", bank, budget=1.0, seed=0, cfg=probe_cfg)
    after = _snapshot(encoder)
    assert all(torch.equal(before[k], after[k]) for k in before)
    assert all(p.requires_grad for p in encoder.parameters())
    assert trained.encoder is encoder
    assert trained.n_train == 36
    assert trained.n_val == 12
    assert 1 <= len(trained.history) <= 2
    assert "val_loss" in trained.history[0]


def test_evaluate_reports_metric_with_ci(bank, encoder, probe_cfg):
    trained = train_probe("T1", encoder, "frozen", bank, budget=0.5, seed=0, cfg=probe_cfg)
    report = evaluate(trained, bank, indices=range(20))
    assert report.task == "T1" and report.metric == "RMSE_mN"
    assert report.ci_lo <= report.value <= report.ci_hi
    assert report.n_eval == 20 and report.budget == 0.5
    with pytest.raises(ConfigError):
        evaluate(trained, bank, indices=[])


def test_partial_tuning_trains_a_copy(bank, encoder, probe_cfg):
    before = _snapshot(encoder)
    trained = train_probe("T2", encoder, "partial", bank, seed=0, cfg=probe_cfg)
    assert trained.encoder is not encoder
    assert all(torch.equal(before[k], v) for k, v in encoder.state_dict().items())
    tuned = trained.encoder
    assert torch.equal(tuned.blocks[0].attn.qkv.weight, encoder.blocks[0].attn.qkv.weight)
    assert not torch.equal(tuned.blocks[-1].attn.qkv.weight, encoder.blocks[-1].attn.qkv.weight)


def test_pose_probe_predictions(bank, encoder, probe_cfg):
    trained = train_probe("T3", encoder, "frozen", bank, budget=0.5, seed=2, cfg=probe_cfg)
    outputs = predict(trained, bank, [0, 5, 9])
    assert set(outputs) == {"dx_mm", "dy_mm", "dtheta_deg"}
    assert all(v.shape == (3, 11) for v in outputs.values())


def test_history_task_uses_offset_window(bank, encoder, probe_cfg):
    trained = train_probe("T4", encoder, "frozen", bank, seed=0, cfg=probe_cfg)
    assert trained.model.history
    report = evaluate(trained, bank)
    assert report.metric == "accuracy"
    assert 0.0 <= report.value <= 1.0


def test_n_shot_adaptation(bank, encoder, probe_cfg):
    train_idx, test_idx = split_by_sequence(bank, 0.25, seed=0)
    support, query = bank.subset(train_idx), bank.subset(test_idx)
    trained = train_probe("T2", encoder, "frozen", support, seed=0, cfg=probe_cfg)
    same, zero_shot = n_shot_adapt(trained, support, 0, query)
    assert same is trained and zero_shot.n_eval == len(query)
    adapted, report = n_shot_adapt(trained, support, 2, query, seed=1)
    assert adapted.n_train == 4
    assert adapted.model is not trained.model
    assert report.model == "ssl-2shot"
    with pytest.raises(ConfigError):
        n_shot_adapt(trained, query, 2, query)
    with pytest.raises(ConfigError):
        n_shot_adapt(train_probe("T1", encoder, "frozen", support, cfg=probe_cfg), support, 2, query)


def test_n_shot_rejects_overlapping_sequences(bank, encoder, probe_cfg):
    train_idx, test_idx = split_by_sequence(bank, 0.25, seed=0)
    support = bank.subset(train_idx)
    # una sola ventana de una secuencia de soporte basta para contaminar la consulta
    query = bank.subset([int(train_idx[0]), *test_idx.tolist()])
    assert support is not query
    trained = train_probe("T2", encoder, "frozen", support, seed=0, cfg=probe_cfg)
    with pytest.raises(ConfigError, match="comparten 1 secuencias"):
        n_shot_adapt(trained, support, 2, query)
    _, report = n_shot_adapt(trained, support, 2, bank.subset(test_idx))
    assert report.n_eval == test_idx.size


def test_probe_config_validation():
    with pytest.raises(ConfigError):
        ProbeConfig(epochs=0)
    with pytest.raises(ConfigError):
        ProbeConfig(val_fraction=1.0)
    with pytest.raises(ConfigError):
        ProbeConfig.from_dict({"learning_rate": 1e-3})
