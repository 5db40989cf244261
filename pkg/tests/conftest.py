from pathlib import Path

import numpy as np
import pytest
import yaml

from hybridca.data.synthetic import synth_proxy, synth_target
from hybridca.nn.backbone import BackboneSpec, StageSpec
from hybridca.nn.model import ModelSpec

SMALL_GEOMETRY = (1, 16, 16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_backbone():
    """Two stride-2 stages on 16x16 images: a 4x4 grid, so 16 entities of width 8"""
    return BackboneSpec(
        stages=(StageSpec(channels=4), StageSpec(channels=8)),
        image_size=(16, 16),
        projection=8,
        label="tiny-cnn",
    )


@pytest.fixture
def small_spec(small_backbone):
    return ModelSpec(
        backbone=small_backbone,
        attention_kind="transformer",
        encoder_layers=1,
        decoder_layers=1,
        heads=2,
        d=8,
        m=2,
        dropout=0.0,
        max_entities=16,
    )


@pytest.fixture
def tiny_target():
    return synth_target(seed=3, n_samples=12, geometry=SMALL_GEOMETRY, noise_sd=0.0)


@pytest.fixture
def tiny_proxy():
    return synth_proxy(seed=4, n_samples=12, geometry=SMALL_GEOMETRY)


TINY_CONFIG = {
    "model": {
        "backbone": {
            "stages": [{"channels": 4}, {"channels": 8}],
            "image_size": [16, 16],
            "projection": 8,
            "label": "tiny-cnn",
        },
        "attention_kind": "transformer",
        "encoder_layers": 1,
        "decoder_layers": 1,
        "heads": 2,
        "d": 8,
        "m": 2,
        "dropout": 0.0,
        "max_entities": 16,
    },
    "pretrain": {"lr": 1.0e-3, "epochs": 1, "batch_size": 4},
    "finetune": {"lr": 1.0e-2, "epochs": 1, "batch_size": 4},
    "data": {
        "proxy": {"seed": 1, "n": 12},
        "target": {"seed": 2, "n": 30, "noise_sd": 0.0},
    },
    "eval": {
        "k": 3,
        "seeds": [0],
        "arms": [
            {"name": "cnn-random-init", "attention_kind": "none", "pretrained": False},
            {"name": "hct", "attention_kind": "transformer", "pretrained": True},
        ],
    },
}


@pytest.fixture
def tiny_config_doc():
    return yaml.safe_load(yaml.safe_dump(TINY_CONFIG))


@pytest.fixture
def tiny_config_path(tmp_path, tiny_config_doc) -> Path:
    """A run configuration on 16x16 images, fast enough for end-to-end command tests"""
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(tiny_config_doc))
    return path
