import numpy as np
import pandas as pd
import pytest

from tacrep.data import SensorProfile, TactileFrame
from tacrep.errors import ConfigError, ManifestError
from tacrep.windows import (
    TactileWindow,
    WindowBank,
    WindowMode,
    clip_indices,
    iterate_windows,
    make_clip_window,
    make_pair_window,
    select_background,
    subtract_background,
    window_labels,
    window_to_tensor,
)


def _frames(n=10, h=4, w=6):
    return [
        TactileFrame(np.full((h, w, 3), i / n, dtype=np.float32), timestamp_us=i, sensor_id="s", sequence_id="q", frame_index=i)
        for i in range(n)
    ]


def test_pair_window_clamps_previous_index():
    seq = _frames()
    win = make_pair_window(seq, 2, stride=5)
    assert win.data.shape == (4, 6, 6)
    assert win.frame_indices == (2, 0)
    np.testing.assert_array_equal(win.data[..., :3], seq[2].pixels)
    np.testing.assert_array_equal(win.data[..., 3:], seq[0].pixels)
    late = make_pair_window(seq, 9, stride=5)
    assert late.frame_indices == (9, 4)


def test_clip_indices_clamp_at_zero():
    assert clip_indices(3) == (3, 1, 0, 0)
    assert clip_indices(10) == (10, 8, 6, 4)
    win = make_clip_window(_frames(), 3)
    assert win.data.shape == (4, 4, 6, 3)
    np.testing.assert_array_equal(win.data[3], win.data[2])


def test_anchor_out_of_range():
    with pytest.raises(ConfigError):
        make_pair_window(_frames(), 10)


def test_window_shape_validation():
    with pytest.raises(ConfigError):
        TactileWindow(WindowMode.PAIR, np.zeros((4, 4, 3)), anchor_index=0)
    with pytest.raises(ConfigError):
        TactileWindow(WindowMode.CLIP, np.zeros((3, 4, 4, 3)), anchor_index=0)


def test_window_to_tensor_layouts():
    seq = _frames()
    assert tuple(window_to_tensor(make_pair_window(seq, 6)).shape) == (6, 4, 6)
    assert tuple(window_to_tensor(make_clip_window(seq, 6)).shape) == (4, 3, 4, 6)


def test_subtract_background_maps_reference_to_half():
    frame = _frames()[3]
    profile = SensorProfile(native_resolution=(4, 6), background_reference=frame.pixels.copy())
    out = subtract_background(frame, profile)
    np.testing.assert_allclose(out.pixels, 0.5)
    with pytest.raises(ConfigError):
        subtract_background(frame, SensorProfile(native_resolution=(4, 6)))


def test_select_background():
    seq = _frames(n=12)
    np.testing.assert_array_equal(select_background(seq, no_contact_frame=2), seq[2].pixels)
    # mediana de los 10 primeros (0/12..9/12)
    np.testing.assert_allclose(select_background(seq), np.full((4, 6, 3), 4.5 / 12), rtol=1e-6)


def test_window_labels_sum_pose_increments():
    table = pd.DataFrame(
        {
            "timestamp_us": np.arange(8),
            "fx_N": np.zeros(8),
            "fy_N": np.zeros(8),
            "fz_N": np.arange(8, dtype=float),
            "dx_mm": np.ones(8),
            "dy_mm": np.zeros(8),
            "dtheta_deg": np.full(8, 0.5),
            "slip": [0, 0, 0, 1, 1, 1, 1, 1],
        }
    )
    rows = np.arange(8)
    lab = window_labels(table, rows, t=6, span=5)
    np.testing.assert_allclose(lab["pose"], [5.0, 0.0, 2.5])
    np.testing.assert_allclose(lab["force"], [0.0, 0.0, 6.0])
    np.testing.assert_allclose(lab["delta_force"], [0.0, 0.0, 5.0])
    assert lab["slip"] == 1
    early = window_labels(table, rows, t=0, span=5)
    np.testing.assert_allclose(early["pose"], np.zeros(3))
    assert window_labels(None, None, 0, 5) == {}


def test_bank_from_corpus(corpus, synth_config):
    bank = WindowBank.from_source(corpus, side=28)
    assert len(bank) == synth_config.n_sequences * synth_config.frames_per_sequence
    x, labels = bank[5]
    assert tuple(x.shape) == (6, 28, 28)
    assert {"force", "delta_force", "slip", "pose", "textile_id", "grasp_success"} <= set(labels)
    assert bank.targets("force").shape == (len(bank), 3)
    assert tuple(bank.stack([0, 1, 2]).shape) == (3, 6, 28, 28)


def test_bank_offsets_stay_in_sequence(bank):
    offsets = bank.with_offset(5)
    for i, j in enumerate(offsets):
        pos_i, t_i = bank.index[i]
        pos_j, t_j = bank.index[j]
        assert pos_i == pos_j
        assert t_j == max(t_i - 5, 0)


def test_bank_subset_shares_frames(bank):
    view = bank.subset([3, 4, 20])
    assert len(view) == 3
    assert view.labels[2] is bank.labels[20]
    np.testing.assert_array_equal(view.stack([0]).numpy(), bank.stack([3]).numpy())


def test_bank_rejects_duplicate_sequence_ids(corpus):
    with pytest.raises(ManifestError):
        WindowBank.from_source([corpus, corpus])


def test_clip_bank(corpus):
    bank = WindowBank.from_source(corpus, mode=WindowMode.CLIP, side=28)
    x, _ = bank[7]
    assert tuple(x.shape) == (4, 3, 28, 28)


def test_iterate_windows_shards_partition_sequences(corpus, synth_config):
    total = sum(1 for _ in iterate_windows(corpus))
    parts = [sum(1 for _ in iterate_windows(corpus, shard=(i, 2))) for i in range(2)]
    assert total == synth_config.n_sequences * synth_config.frames_per_sequence
    assert sum(parts) == total
    with pytest.raises(ConfigError):
        next(iterate_windows(corpus, shard=(2, 2)))


def test_iterate_windows_from_manifest_honours_selection(manifest_path):
    from tacrep.data import load_manifest, split_by_budget

    manifest = split_by_budget(load_manifest(manifest_path), 0.25, seed=0)
    windows = list(iterate_windows(manifest, side=14))
    assert len(windows) == len(manifest.selection)
    window, labels = windows[0]
    assert window.data.shape == (14, 14, 6)
    assert "force" in labels
