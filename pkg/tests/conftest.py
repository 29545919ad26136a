from __future__ import annotations

from pathlib import Path

import pytest

from tacrep.encoder import EncoderConfig, encoder_preset
from tacrep.synth import SynthConfig, SynthCorpus, render_corpus, synth_generate
from tacrep.windows import WindowBank


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="Ejecuta también los tests marcados como slow.")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="necesita --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def synth_config() -> SynthConfig:
    return SynthConfig(n_sequences=4, frames_per_sequence=12, image_size=(28, 28), seed=0)


@pytest.fixture
def corpus(synth_config) -> SynthCorpus:
    return render_corpus(synth_config)


@pytest.fixture
def synth_dir(tmp_path, synth_config) -> Path:
    out = tmp_path / "synth"
    synth_generate(synth_config, out)
    return out


@pytest.fixture
def manifest_path(synth_dir) -> Path:
    return synth_dir / "manifest.json"


@pytest.fixture
def tiny_cfg() -> EncoderConfig:
    return encoder_preset("tiny", img_size=28, depth=2)


@pytest.fixture
def bank(corpus, tiny_cfg) -> WindowBank:
    return WindowBank.from_source(corpus, side=tiny_cfg.img_size)
