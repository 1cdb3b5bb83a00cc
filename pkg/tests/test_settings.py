from __future__ import annotations

from pathlib import Path

import pytest
import yaml

from config.assumptions import (
    ENV_BACKEND_TIMEOUT,
    ENV_CAPTION_MODEL,
    ENV_DETECT_URL,
    ENV_MAX_INFLIGHT,
    ENV_OUTPAINT_URL,
)
from config.settings import RESOLVED_CONFIG_NAME, load_run_config
from utils.errors import UserInputError

ENV_NAMES = (ENV_OUTPAINT_URL, ENV_DETECT_URL, ENV_BACKEND_TIMEOUT, ENV_MAX_INFLIGHT, ENV_CAPTION_MODEL, "OPENAI_API_KEY")


@pytest.fixture(autouse=True)
def clean_env(monkeypatch, tmp_path):
    # set-then-delete so anything a .env file loads is removed again afterwards
    for name in ENV_NAMES:
        monkeypatch.setenv(name, "")
        monkeypatch.delenv(name)
    monkeypatch.chdir(tmp_path)


def _yaml(path: Path, tree: dict) -> Path:
    path.write_text(yaml.safe_dump(tree), encoding="utf-8")
    return path


def test_defaults():
    cfg = load_run_config()
    assert cfg.seed == 0
    assert cfg.backend.kind == "mock" and not cfg.backend.use_openai
    assert cfg.train.lr == 1e-4 and cfg.train.warmup_steps == 500
    assert cfg.model.variant == "base"


def test_yaml_file_and_seed_propagation(tmp_path):
    path = _yaml(
        tmp_path / "run.yaml",
        {"seed": 7, "train": {"epochs": 3, "ablate": ["no-subject"], "augment": {"bbox_jitter": 0.0}}, "model": {"variant": "conditional"}},
    )
    cfg = load_run_config(path)
    assert cfg.seed == 7 and cfg.train.seed == 7 and cfg.datagen.seed == 7
    assert cfg.train.epochs == 3
    assert cfg.train.ablate == ("no-subject",)
    assert cfg.train.augment.bbox_jitter == 0.0
    assert cfg.model.variant == "conditional"


def test_section_seed_wins_over_the_global_seed(tmp_path):
    cfg = load_run_config(_yaml(tmp_path / "run.yaml", {"seed": 7, "train": {"seed": 3}}))
    assert cfg.train.seed == 3 and cfg.datagen.seed == 7


def test_cli_overrides_replace_file_values(tmp_path):
    path = _yaml(tmp_path / "run.yaml", {"train": {"epochs": 3, "lr": 0.01}})
    cfg = load_run_config(path, {"train.epochs": 9, "train.lr": None, "model.backbone": "resnet50"})
    assert cfg.train.epochs == 9
    assert cfg.train.lr == 0.01
    assert cfg.model.backbone == "resnet50"


@pytest.mark.parametrize("variant", ["ranking", "unet"])
def test_auxiliary_variants_get_their_own_schedule(variant):
    cfg = load_run_config(overrides={"model.variant": variant})
    assert cfg.train.epochs == 10 and cfg.train.warmup_steps == 0
    explicit = load_run_config(overrides={"model.variant": variant, "train.epochs": 3})
    assert explicit.train.epochs == 3 and explicit.train.warmup_steps == 0
    assert load_run_config(overrides={"model.variant": "conditional"}).train.epochs == 50


@pytest.mark.parametrize(
    "overrides",
    [{"train.epoch": 3}, {"training.epochs": 3}, {"train.lr": -1.0}, {"model.variant": "gan"}],
)
def test_bad_keys_and_values_are_user_errors(overrides):
    with pytest.raises(UserInputError):
        load_run_config(overrides=overrides)


def test_config_file_errors(tmp_path):
    with pytest.raises(UserInputError):
        load_run_config(tmp_path / "missing.yaml")
    listing = tmp_path / "list.yaml"
    listing.write_text("- 1\n- 2\n", encoding="utf-8")
    with pytest.raises(UserInputError):
        load_run_config(listing)


def test_environment_fills_backend_settings(monkeypatch):
    monkeypatch.setenv(ENV_OUTPAINT_URL, "http://outpaint.invalid")
    monkeypatch.setenv(ENV_BACKEND_TIMEOUT, "12.5")
    monkeypatch.setenv(ENV_MAX_INFLIGHT, "3")
    monkeypatch.setenv("OPENAI_API_KEY", "sk-test")
    cfg = load_run_config()
    assert cfg.backend.outpaint_url == "http://outpaint.invalid"
    assert cfg.backend.timeout == 12.5 and cfg.backend.max_inflight == 3
    assert cfg.backend.use_openai

    explicit = load_run_config(overrides={"backend.outpaint_url": "http://cli.invalid"})
    assert explicit.backend.outpaint_url == "http://cli.invalid"


def test_bad_numeric_environment(monkeypatch):
    monkeypatch.setenv(ENV_MAX_INFLIGHT, "many")
    with pytest.raises(UserInputError):
        load_run_config()


def test_env_file_is_read(tmp_path):
    env_file = tmp_path / "outcrop.env"
    env_file.write_text(f"{ENV_DETECT_URL}=http://detect.invalid\n", encoding="utf-8")
    assert load_run_config(env_file=env_file).backend.detect_url == "http://detect.invalid"


def test_resolved_config_round_trips(tmp_path):
    cfg = load_run_config(overrides={"train.epochs": 4, "seed": 5, "datagen.area_range": [0.2, 0.4]})
    path = cfg.write_resolved(tmp_path / "out")
    assert path.name == RESOLVED_CONFIG_NAME
    reloaded = load_run_config(path)
    assert reloaded.to_dict() == cfg.to_dict()
    assert reloaded.datagen.area_range == (0.2, 0.4)


def test_paths_resolve_against_the_workdir(tmp_path):
    cfg = load_run_config(overrides={"workdir": str(tmp_path / "work")})
    assert cfg.path("data/manifest.jsonl") == tmp_path / "work" / "data" / "manifest.jsonl"
    assert cfg.path(tmp_path / "abs.txt") == tmp_path / "abs.txt"
