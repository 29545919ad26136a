import math

import numpy as np
import pytest
import torch

from tacrep.errors import ConfigError
from tacrep.losses import (
    DinoHeadState,
    detect_collapse,
    dino_loss,
    jepa_loss,
    mae_loss,
    normalize_patches,
    psnr,
    teacher_probs,
)
from tacrep.masks import MaskSpec


def test_normalize_patches_standardizes_each_patch():
    x = torch.randn(2, 5, 12) * 3 + 7
    out = normalize_patches(x)
    torch.testing.assert_close(out.mean(-1), torch.zeros(2, 5), atol=1e-5, rtol=0)
    torch.testing.assert_close(out.var(-1), torch.ones(2, 5), atol=1e-3, rtol=0)


def test_mae_loss_only_counts_masked_patches():
    torch.manual_seed(0)
    target = torch.randn(2, 4, 8)
    mask = MaskSpec(visible_idx=[0, 1], masked_idx=[2, 3], kind="random", n_tokens=4)
    recon = normalize_patches(target).clone()
    assert float(mae_loss(recon, target, mask)) == pytest.approx(0.0, abs=1e-10)
    recon[:, :2] += 5.0
    assert float(mae_loss(recon, target, mask)) == pytest.approx(0.0, abs=1e-10)
    recon[:, 2:] += 1.0
    assert float(mae_loss(recon, target, mask)) == pytest.approx(1.0, rel=1e-5)
    assert float(mae_loss(target, target, mask, norm_pix=False)) == 0.0
    with pytest.raises(ConfigError):
        mae_loss(recon[:, :3], target, mask)


def test_dino_loss_updates_center_and_only_student_gets_gradients():
    head = DinoHeadState(n_prototypes=6, center_momentum=0.9)
    student = torch.randn(4, 6, requires_grad=True)
    teacher = torch.randn(4, 6, requires_grad=True)
    loss = dino_loss(student, teacher, head)
    loss.backward()
    assert student.grad is not None
    assert teacher.grad is None
    torch.testing.assert_close(head.center, 0.1 * teacher.detach().mean(0))
    assert float(loss) > 0


def test_dino_loss_skips_same_view_pairs():
    head = DinoHeadState(n_prototypes=3)
    g0, g1 = torch.randn(2, 3), torch.randn(2, 3)
    local = torch.randn(2, 3)
    multi = dino_loss([g0, g1, local], [g0, g1], head, update=False)
    expected = (
        dino_loss(g1, g0, head, update=False)
        + dino_loss(local, g0, head, update=False)
        + dino_loss(g0, g1, head, update=False)
        + dino_loss(local, g1, head, update=False)
    ) / 4
    torch.testing.assert_close(multi, expected)
    with pytest.raises(ConfigError):
        dino_loss([g0], [g0], head)


def test_teacher_probs_sharpen_with_low_temperature():
    head = DinoHeadState(n_prototypes=3)
    logits = torch.tensor([[1.0, 0.0, 0.0]])
    sharp = teacher_probs(logits, head, teacher_temp=0.01)
    soft = teacher_probs(logits, head, teacher_temp=10.0)
    assert float(sharp[0, 0]) > float(soft[0, 0])
    torch.testing.assert_close(sharp.sum(-1), torch.ones(1))
    with pytest.raises(ConfigError):
        DinoHeadState(n_prototypes=3, teacher_temp=0.0)


def test_jepa_loss_mean_over_blocks_without_target_gradient():
    pred = [torch.zeros(1, 2, 4, requires_grad=True), torch.zeros(1, 3, 4, requires_grad=True)]
    tgt = [torch.ones(1, 2, 4, requires_grad=True), torch.full((1, 3, 4), 2.0)]
    loss = jepa_loss(pred, tgt)
    assert float(loss) == pytest.approx((1.0 + 4.0) / 2)
    loss.backward()
    assert pred[0].grad is not None and tgt[0].grad is None
    with pytest.raises(ConfigError):
        jepa_loss(pred, tgt[:1])


def test_detect_collapse_flags_uniform_and_single_class():
    k = 8
    uniform = torch.full((16, k), 1.0 / k)
    assert detect_collapse(uniform).collapsed
    peaked = torch.zeros(16, k)
    peaked[:, 3] = 1.0
    assert detect_collapse(peaked).collapsed
    diverse = torch.eye(k)
    report = detect_collapse(diverse, center=torch.ones(4))
    assert not report.collapsed
    assert report.diversity == pytest.approx(math.log(k), rel=1e-5)
    assert report.center_norm == pytest.approx(2.0)


def test_psnr_caps_and_scales():
    x = torch.zeros(10)
    assert psnr(x, x) == 99.0
    assert psnr(x, torch.full((10,), 0.1)) == pytest.approx(20.0)
    assert psnr(x, torch.full((10,), 1e-8)) == 99.0
