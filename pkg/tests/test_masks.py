import numpy as np
import pytest

from tacrep.errors import ConfigError
from tacrep.masks import MaskKind, MaskSpec, sample_block_mask, sample_random_mask, sample_tube_mask


def _assert_partition(mask: MaskSpec):
    joined = np.concatenate([mask.visible_idx, mask.masked_idx])
    np.testing.assert_array_equal(np.sort(joined), np.arange(mask.n_tokens))


def test_random_mask_floor_ratio():
    mask = sample_random_mask(16, 0.75, np.random.default_rng(0))
    _assert_partition(mask)
    assert mask.masked_idx.size == 12
    assert mask.ratio == 0.75
    assert mask.kind is MaskKind.RANDOM
    again = sample_random_mask(16, 0.75, np.random.default_rng(0))
    np.testing.assert_array_equal(mask.masked_idx, again.masked_idx)


@pytest.mark.parametrize("ratio,n", [(0.0, 16), (1.0, 16), (0.05, 16)])
def test_random_mask_rejects_degenerate(ratio, n):
    with pytest.raises(ConfigError):
        sample_random_mask(n, ratio, np.random.default_rng(0))


def test_block_mask_targets_are_masked_rectangles():
    mask = sample_block_mask((8, 8), n_targets=4, rng=np.random.default_rng(3))
    _assert_partition(mask)
    assert len(mask.blocks) == 4
    masked = set(mask.masked_idx.tolist())
    for block, (top, left, h, w) in zip(mask.blocks, mask.params["rects"]):
        assert set(block.tolist()) <= masked
        rows, cols = np.divmod(block, 8)
        assert rows.min() == top and rows.max() == top + h - 1
        assert cols.min() == left and cols.max() == left + w - 1
        assert block.size == h * w


def test_block_mask_with_context_block():
    mask = sample_block_mask((8, 8), n_targets=2, rng=np.random.default_rng(1), context_scale=(0.85, 1.0))
    _assert_partition(mask)
    assert mask.visible_idx.size > 0
    for block in mask.blocks:
        assert not set(block.tolist()) & set(mask.visible_idx.tolist())


def test_block_mask_empty_context_raises():
    with pytest.raises(ConfigError):
        sample_block_mask((2, 2), n_targets=1, scale_range=(1.0, 1.0), aspect_range=(1.0, 1.0), rng=np.random.default_rng(0))
    with pytest.raises(ConfigError):
        sample_block_mask((4, 4), n_targets=1)


def test_tube_mask_repeats_spatial_mask_in_time():
    mask = sample_tube_mask((2, 4, 4), ratio=0.15, rng=np.random.default_rng(2), n_blocks=2)
    _assert_partition(mask)
    assert mask.n_tokens == 32
    first = mask.masked_idx[mask.masked_idx < 16]
    second = mask.masked_idx[mask.masked_idx >= 16]
    np.testing.assert_array_equal(second, first + 16)
    assert mask.kind is MaskKind.TUBE
    with pytest.raises(ConfigError):
        sample_tube_mask((4, 4), rng=np.random.default_rng(0))


def test_mask_spec_requires_partition():
    with pytest.raises(ConfigError):
        MaskSpec(visible_idx=[0, 1], masked_idx=[1, 2], kind="random", n_tokens=3)
    spec = MaskSpec(visible_idx=[2, 0], masked_idx=[1], kind="random", n_tokens=3)
    assert spec.visible().tolist() == [0, 2]
    assert [b.tolist() for b in spec.blocks] == [[1]]
