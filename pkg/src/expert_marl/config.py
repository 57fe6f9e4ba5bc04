"""Experiment configuration: dataclasses plus strict YAML (de)serialisation."""
from __future__ import annotations

import dataclasses
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .env import ConfigError, WorldConfig
from .experts import LlmEndpointConfig
from .qmix import AlgorithmConfig

EXPERT_KINDS = ("none", "a-star", "llm")
PRESET_DIR = Path(__file__).parent / "presets"


@dataclass(frozen=True)
class ExpertConfig:
    kind: str = "none"
    grid_resolution: int = 20
    llm: LlmEndpointConfig = field(default_factory=LlmEndpointConfig)

    def __post_init__(self):
        if self.kind not in EXPERT_KINDS:
            raise ConfigError(f"expert.kind must be one of {EXPERT_KINDS}, got {self.kind!r}")
        if self.grid_resolution < 2:
            raise ConfigError("expert.grid_resolution must be >= 2")


@dataclass(frozen=True)
class TrainingConfig:
    total_steps: int = 20_000
    eval_interval: int = 1_000
    eval_episodes: int = 20
    replay_capacity: int = 50_000
    seed: int = 0

    def __post_init__(self):
        if self.total_steps < 1 or self.eval_episodes < 1 or self.eval_interval < 1:
            raise ConfigError("total_steps, eval_interval and eval_episodes must be >= 1")
        if self.replay_capacity < 1:
            raise ConfigError("replay_capacity must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


@dataclass(frozen=True)
class ExperimentConfig:
    experiment_name: str = "qmix"
    env: WorldConfig = field(default_factory=WorldConfig)
    algorithm: AlgorithmConfig = field(default_factory=AlgorithmConfig)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    fine_tune_llm: bool = False
    fine_tune_samples: int = 1000

    def __post_init__(self):
        if self.fine_tune_samples < 1:
            raise ConfigError("fine_tune_samples must be >= 1")
        if not self.experiment_name or "/" in self.experiment_name:
            raise ConfigError("experiment_name must be a non-empty name without '/'")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(
            self,
            env=dataclasses.replace(self.env, seed=seed),
            training=dataclasses.replace(self.training, seed=seed),
        )


def _coerce(value, tp, path: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    if origin is typing.Union or (origin is not None and type(None) in typing.get_args(tp)):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, str) and value.strip().lower() in ("disabled", "inf", ".inf"):
            return math.inf
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data, path: str = ""):
    """Build dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            where = f" in {path}" if path else ""
            raise ConfigError(f"unknown configuration key {key!r}{where}")
    kwargs = {}
    for name in names & set(data):
        sub = f"{path}.{name}" if path else name
        kwargs[name] = _coerce(data[name], hints[name], sub)
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        out[f.name] = to_dict(value) if dataclasses.is_dataclass(value) else value
    return out


def resolve_config_path(path) -> Path:
    p = Path(path)
    if p.exists():
        return p
    for candidate in (PRESET_DIR / p.name, PRESET_DIR / f"{p.name}.yaml"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"config file not found: {path}")


def load_config(path) -> ExperimentConfig:
    p = resolve_config_path(path)
    with open(p, encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    return from_dict(ExperimentConfig, data)


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(config), sort_keys=False)


def save_config(config: ExperimentConfig, path) -> Path:
    p = Path(path)
    p.write_text(dump_config(config), encoding="utf-8")
    return p


def config_from_yaml(text: str) -> ExperimentConfig:
    return from_dict(ExperimentConfig, yaml.safe_load(text))


def list_presets() -> list[str]:
    return sorted(p.name for p in PRESET_DIR.glob("*.yaml"))
