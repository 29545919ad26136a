import json

import numpy as np
import pandas as pd
import pytest

from tacrep.data import (
    SensorProfile,
    TactileFrame,
    join_labels,
    load_labels,
    load_manifest,
    load_sequence,
    save_manifest,
    selected_indices,
    split_by_budget,
    validate_manifest,
)
from tacrep.errors import ConfigError, ManifestError


def test_frame_clips_pixels_and_rejects_bad_shapes():
    frame = TactileFrame(np.full((4, 5, 3), 1.7), timestamp_us=0, sensor_id="s", sequence_id="q", frame_index=0)
    assert frame.pixels.max() == 1.0
    assert frame.shape == (4, 5)
    with pytest.raises(ConfigError):
        TactileFrame(np.zeros((4, 5)), timestamp_us=0, sensor_id="s", sequence_id="q", frame_index=0)


def test_sensor_profile_validation():
    profile = SensorProfile(fps=50.0)
    assert profile.frame_period_us == pytest.approx(20000.0)
    with pytest.raises(ConfigError):
        SensorProfile(fps=0.0)
    with pytest.raises(ConfigError):
        SensorProfile(native_resolution=(10, 10), background_reference=np.zeros((8, 8, 3)))


def test_generated_manifest_is_valid(manifest_path, synth_config):
    manifest = load_manifest(manifest_path)
    assert validate_manifest(manifest) == []
    assert [s.sequence_id for s in manifest.sequences] == ["seq_0000", "seq_0001", "seq_0002", "seq_0003"]
    profile = manifest.profile_for(manifest.sequences[0])
    assert profile.background_reference.shape == (28, 28, 3)
    assert len(manifest.examples()) == synth_config.n_sequences * synth_config.frames_per_sequence


def test_load_sequence_timestamps(manifest_path):
    manifest = load_manifest(manifest_path)
    entry = manifest.sequences[1]
    frames = load_sequence(manifest, entry)
    period = manifest.profile_for(entry).frame_period_us
    assert [f.timestamp_us for f in frames] == [int(entry.start_us + round(i * period)) for i in range(entry.n_frames)]


def test_validate_reports_missing_labels_and_duplicates(manifest_path):
    (manifest_path.parent / "seq_0002" / "labels.csv").unlink()
    manifest = load_manifest(manifest_path, validate=False)
    manifest.sequences.append(manifest.sequences[0])
    problems = validate_manifest(manifest)
    assert any("etiquetas" in p and "seq_0002" in p for p in problems)
    assert any("duplicado" in p for p in problems)
    with pytest.raises(ManifestError):
        load_manifest(manifest_path)


def test_validate_reports_missing_frames_and_dangling_selection(manifest_path):
    (manifest_path.parent / "seq_0001" / "frame_000003.png").unlink()
    manifest = load_manifest(manifest_path, validate=False)
    manifest.selection = [("seq_9999", 0)]
    problems = validate_manifest(manifest)
    assert any("seq_0001" in p and "frames" in p for p in problems)
    assert any("colgante" in p for p in problems)


def test_unreadable_manifest(tmp_path):
    path = tmp_path / "manifest.json"
    path.write_text("{not json")
    with pytest.raises(ManifestError):
        load_manifest(path)


def test_load_labels_requires_timestamp(tmp_path):
    path = tmp_path / "labels.csv"
    pd.DataFrame({"fx_N": [0.1, 0.2]}).to_csv(path, index=False)
    with pytest.raises(ManifestError):
        load_labels(path)


def test_join_labels_nearest_row_and_gap_limit():
    period = 1e6 / 60
    frames = np.array([0, 16667, 33333])
    idx = join_labels(frames, np.array([0, 16000, 34000]), period)
    np.testing.assert_array_equal(idx, [0, 1, 2])
    with pytest.raises(ManifestError):
        join_labels(np.array([0, 16667, 50000]), np.array([0, 16667]), period)


def test_budget_subsets_are_nested(manifest_path):
    manifest = load_manifest(manifest_path)
    full = split_by_budget(manifest, 1.0, seed=3)
    large = split_by_budget(manifest, 0.5, seed=3)
    small = split_by_budget(manifest, 0.1, seed=3)
    assert len(full.selection) == 48
    assert len(large.selection) == 24
    # floor(0.1·48 + 0.5) = 5
    assert len(small.selection) == 5
    assert set(small.selection) <= set(large.selection) <= set(full.selection)
    assert split_by_budget(manifest, 0.1, seed=3).selection == small.selection
    assert small.budget == 0.1


def test_budget_stratified_by_label_column(manifest_path):
    manifest = load_manifest(manifest_path)
    large = split_by_budget(manifest, 0.5, seed=0, stratify_by="textile_id")
    small = split_by_budget(manifest, 0.25, seed=0, stratify_by="textile_id")
    assert set(small.selection) <= set(large.selection)
    per_sequence = {sid: len(selected_indices(large, sid)) for sid in ("seq_0000", "seq_0001", "seq_0002", "seq_0003")}
    # un textil por secuencia: cada estrato conserva la mitad de sus 12 frames
    assert set(per_sequence.values()) == {6}


def test_budget_rejects_invalid_fraction(manifest_path):
    manifest = load_manifest(manifest_path)
    with pytest.raises(ConfigError):
        split_by_budget(manifest, 0.0, seed=0)
    with pytest.raises(ConfigError):
        split_by_budget(manifest, 1.5, seed=0)


def test_selection_is_persisted(manifest_path, tmp_path):
    manifest = split_by_budget(load_manifest(manifest_path), 0.25, seed=1)
    save_manifest(manifest)
    raw = json.loads(manifest_path.read_text())
    assert raw["budget"] == 0.25
    assert load_manifest(manifest_path).selection == manifest.selection
