from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from core.backends import build_backends
from core.cropmodel import ModelConfig
from core.datagen import DatagenConfig, discover_sources, load_records, run_generation
from core.geometry import SubjectRegion
from core.scenegen import SceneSpec, generate_scene, write_scene_corpus
from core.trainer import AugmentConfig, TrainConfig


@pytest.fixture
def scene():
    return generate_scene(SceneSpec(seed=3))


@pytest.fixture
def box_subject():
    """64x64 image with a rectangular subject covering [16, 40) x [20, 48)."""

    mask = np.zeros((64, 64), dtype=bool)
    mask[20:48, 16:40] = True
    return SubjectRegion.from_mask(mask)


@pytest.fixture
def corpus(tmp_path: Path):
    return write_scene_corpus(tmp_path / "scenes", n_sources=6, n_eval=3, seed=0)


@pytest.fixture
def datagen_cfg() -> DatagenConfig:
    return DatagenConfig(canvas_size=128, amplify=2, seed=0, workers=2)


@pytest.fixture
def manifest(tmp_path: Path, corpus, datagen_cfg) -> Path:
    path = tmp_path / "data" / "manifest.jsonl"
    run_generation(discover_sources(corpus["sources"]), build_backends("mock"), datagen_cfg, path, quiet=True)
    assert load_records(path), "mock generation should keep at least one record"
    return path


@pytest.fixture
def tiny_model_cfg() -> ModelConfig:
    return ModelConfig(
        input_size=64,
        feature_grid=4,
        fused_channels=8,
        encoder_heads=2,
        encoder_layers=1,
        roi_pool=3,
        composition_hidden=16,
        conditioning_hidden=8,
        aux_input_size=64,
    )


@pytest.fixture
def tiny_train_cfg() -> TrainConfig:
    return TrainConfig(
        lr=1e-3,
        warmup_steps=1,
        batch_size=4,
        epochs=2,
        workers=1,
        augment=AugmentConfig(enabled=True),
    )
