"""Run configuration: YAML file, then CLI overrides; environment variables fill backend keys left unset."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import yaml
from dotenv import load_dotenv

from config.assumptions import (
    DEFAULT_BACKEND_TIMEOUT,
    DEFAULT_CAPTION_MODEL,
    DEFAULT_MAX_INFLIGHT,
    ENV_BACKEND_TIMEOUT,
    ENV_CAPTION_MODEL,
    ENV_DETECT_URL,
    ENV_MAX_INFLIGHT,
    ENV_OUTPAINT_URL,
)
from core.cropmodel import ModelConfig
from core.datagen import DatagenConfig
from core.evalkit import EvalConfig
from core.qualityfilter import FilterConfig
from core.trainer import TrainConfig
from utils.errors import UserInputError

RESOLVED_CONFIG_NAME = "resolved_config.yaml"


@dataclass
class BackendSettings:
    kind: str = "mock"
    outpaint_url: Optional[str] = None
    detect_url: Optional[str] = None
    timeout: float = DEFAULT_BACKEND_TIMEOUT
    max_inflight: int = DEFAULT_MAX_INFLIGHT
    caption_model: str = DEFAULT_CAPTION_MODEL
    use_openai: bool = False


_SECTIONS = {
    "datagen": DatagenConfig,
    "filter": FilterConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "backend": BackendSettings,
}


@dataclass
class RunConfig:
    datagen: DatagenConfig = field(default_factory=DatagenConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    backend: BackendSettings = field(default_factory=BackendSettings)
    seed: int = 0
    workdir: str = "."

    def to_dict(self) -> Dict[str, Any]:
        return _plain(asdict(self))

    def write_resolved(self, out_dir: str | Path) -> Path:
        """Persist the fully merged tree next to a command's outputs."""

        path = Path(out_dir) / RESOLVED_CONFIG_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True), encoding="utf-8")
        return path

    def path(self, value: str | Path) -> Path:
        """Resolve ``value`` against the workdir unless it is absolute."""

        candidate = Path(value)
        return candidate if candidate.is_absolute() else Path(self.workdir) / candidate


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    return value


def _merge(base: Dict[str, Any], extra: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in extra.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _nest(overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """``{"train.epochs": 5}`` -> ``{"train": {"epochs": 5}}``; ``None`` values are dropped."""

    tree: Dict[str, Any] = {}
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = tree
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return tree


def _env_settings() -> Dict[str, Any]:
    env: Dict[str, Any] = {}
    if os.getenv(ENV_OUTPAINT_URL):
        env["outpaint_url"] = os.getenv(ENV_OUTPAINT_URL)
    if os.getenv(ENV_DETECT_URL):
        env["detect_url"] = os.getenv(ENV_DETECT_URL)
    try:
        if os.getenv(ENV_BACKEND_TIMEOUT):
            env["timeout"] = float(os.environ[ENV_BACKEND_TIMEOUT])
        if os.getenv(ENV_MAX_INFLIGHT):
            env["max_inflight"] = int(os.environ[ENV_MAX_INFLIGHT])
    except ValueError as exc:
        raise UserInputError(f"Invalid numeric backend setting in the environment: {exc}") from exc
    if os.getenv(ENV_CAPTION_MODEL):
        env["caption_model"] = os.getenv(ENV_CAPTION_MODEL)
    if os.getenv("OPENAI_API_KEY"):
        env["use_openai"] = True
    return env


def _build_section(name: str, values: Mapping[str, Any], variant: str = "base") -> Any:
    cls = _SECTIONS[name]
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise UserInputError(f"Unknown key(s) in '{name}' config: {sorted(unknown)}.")
    try:
        if cls is TrainConfig:
            # schedule defaults follow the model variant; explicit keys still win
            return TrainConfig.for_variant(variant, **values)
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UserInputError(f"Invalid '{name}' config: {exc}") from exc


def load_run_config(
    path: Optional[str | Path] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    env_file: Optional[str | Path] = None,
) -> RunConfig:
    """Merge defaults, a YAML file, dotted CLI overrides and backend environment variables."""

    load_dotenv(dotenv_path=env_file)
    tree: Dict[str, Any] = {}
    if path:
        path = Path(path)
        if not path.is_file():
            raise UserInputError(f"Config file not found: {path}")
        loaded = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        if not isinstance(loaded, dict):
            raise UserInputError(f"Config file {path} must hold a mapping at the top level.")
        tree = loaded
    tree = _merge(tree, _nest(overrides or {}))
    tree = _merge({"backend": _env_settings()}, tree)

    unknown = set(tree) - set(_SECTIONS) - {"seed", "workdir"}
    if unknown:
        raise UserInputError(f"Unknown config section(s): {sorted(unknown)}.")

    seed = int(tree.get("seed", 0))
    sections = {}
    for name in _SECTIONS:
        values = dict(tree.get(name) or {})
        if name in ("datagen", "train") and "seed" in {f.name for f in fields(_SECTIONS[name])}:
            values.setdefault("seed", seed)
        variant = getattr(sections.get("model"), "variant", "base")
        sections[name] = _build_section(name, values, variant)
    return RunConfig(**sections, seed=seed, workdir=str(tree.get("workdir", ".")))
