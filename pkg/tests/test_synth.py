import numpy as np
import pytest

from tacrep.data import SensorType, load_manifest, load_sequence, load_sequence_labels
from tacrep.errors import ConfigError
from tacrep.labels import label_slip_array
from tacrep.synth import Indenter, SynthConfig, render_corpus, synth_generate


def test_corpus_is_deterministic(synth_config):
    a = render_corpus(synth_config)
    b = render_corpus(synth_config)
    for sa, sb in zip(a.sequences, b.sequences):
        np.testing.assert_array_equal(np.stack([f.pixels for f in sa.frames]), np.stack([f.pixels for f in sb.frames]))
        assert sa.labels.equals(sb.labels)
    c = render_corpus(SynthConfig(n_sequences=4, frames_per_sequence=12, image_size=(28, 28), seed=1))
    assert not np.array_equal(a.sequences[0].frames[-1].pixels, c.sequences[0].frames[-1].pixels)


def test_slip_column_matches_friction_cone(corpus, synth_config):
    for seq in corpus.sequences:
        forces = seq.labels[["fx_N", "fy_N", "fz_N"]].to_numpy()
        np.testing.assert_array_equal(seq.labels["slip"].to_numpy(), label_slip_array(forces, synth_config.friction_mu))


def test_first_frame_has_no_contact(corpus):
    for seq in corpus.sequences:
        assert seq.entry.no_contact_frame == 0
        first = seq.labels.iloc[0]
        assert first["fz_N"] == 0.0 and first["slip"] == 0
        np.testing.assert_allclose(seq.frames[0].pixels, corpus.profile.background_reference, atol=0.06)


def test_sequence_ids_and_textiles(corpus):
    assert [s.entry.sequence_id for s in corpus.sequences] == ["seq_0000", "seq_0001", "seq_0002", "seq_0003"]
    assert [int(s.labels["textile_id"].iloc[0]) for s in corpus.sequences] == [0, 1, 2, 3]
    assert corpus.sensor_id == "digit_synth"
    assert set(corpus.commanded_motion) == set(corpus.labels)


def test_longer_strokes_reach_slip():
    corpus = render_corpus(SynthConfig(n_sequences=2, frames_per_sequence=40, image_size=(24, 24), seed=4))
    for seq in corpus.sequences:
        assert seq.labels["slip_onset"].sum() == 1
        assert seq.labels["slip"].iloc[-1] == 1


def test_synth_generate_round_trips_through_disk(tmp_path, synth_config):
    manifest, labels = synth_generate(synth_config, tmp_path / "out")
    assert (tmp_path / "out" / "manifest.json").is_file()
    assert (tmp_path / "out" / "background_digit_synth.png").is_file()
    loaded = load_manifest(tmp_path / "out" / "manifest.json")
    entry = loaded.sequences[2]
    table = load_sequence_labels(loaded, entry)
    np.testing.assert_allclose(table["fz_N"].to_numpy(), labels["seq_0002"]["fz_N"].to_numpy(), rtol=0, atol=1e-12)
    frames = load_sequence(loaded, entry)
    memory = render_corpus(synth_config).sequences[2].frames
    assert len(frames) == synth_config.frames_per_sequence
    # PNG de 8 bits: error de cuantización <= 1/255
    assert max(np.abs(a.pixels - b.pixels).max() for a, b in zip(frames, memory)) <= 0.5 / 255 + 1e-6


@pytest.mark.parametrize(
    "overrides",
    [{"friction_mu": 0.0}, {"gel_stiffness": -1.0}, {"image_size": (4, 4)}, {"textile_classes": 21}, {"noise_sigma": -0.1}],
)
def test_invalid_config(overrides):
    with pytest.raises(ConfigError):
        SynthConfig(**overrides)


def test_from_dict_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        SynthConfig.from_dict({"n_sequences": 2, "colour": "blue"})
    cfg = SynthConfig.from_dict({"sensor_type": "GelSight2017", "indenter": "flat"})
    assert cfg.sensor_type is SensorType.GELSIGHT_2017
    assert cfg.indenter is Indenter.FLAT
    assert cfg.has_markers


@pytest.mark.parametrize("sensor", ["DIGIT", "GelSight2017", "GelSightMini"])
def test_every_sensor_renders(sensor):
    corpus = render_corpus(SynthConfig(n_sequences=1, frames_per_sequence=6, image_size=(16, 20), sensor_type=sensor))
    pixels = np.stack([f.pixels for f in corpus.sequences[0].frames])
    assert pixels.shape == (6, 16, 20, 3)
    assert pixels.min() >= 0.0 and pixels.max() <= 1.0
