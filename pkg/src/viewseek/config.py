"""Run configuration: one YAML file, validated section by section.

Precedence: command-line flags override the file, the file overrides defaults.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .embodiment import SpawnConfig
from .episodes import EnvConfig
from .geomcore import CameraConfig
from .perceptsim import EmulatorParams, SegConfidenceWeights
from .policies import HeuristicThresholds
from .rewardkit import RewardWeights
from .scenegen import SceneConfig
from .trainkit import GrpoConfig, SftConfig, TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 200
    per_scene: int = 5

    def __post_init__(self) -> None:
        if self.episodes < 1 or self.per_scene < 1:
            raise ValueError("episodes and per_scene must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    jobs: int = 1
    standoff: float = 1.5
    train_pool: int = 400
    scene: SceneConfig = field(default_factory=SceneConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    emulator: EmulatorParams = field(default_factory=EmulatorParams)
    seg_weights: SegConfidenceWeights = field(default_factory=SegConfidenceWeights)
    reward: RewardWeights = field(default_factory=RewardWeights)
    heuristic: HeuristicThresholds = field(default_factory=HeuristicThresholds)
    spawn: SpawnConfig = field(default_factory=SpawnConfig)
    sft: SftConfig = field(default_factory=SftConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def env(self) -> EnvConfig:
        return EnvConfig(self.camera, self.emulator, self.seg_weights, self.reward, self.heuristic, self.standoff)

    def train_config(self, use_sft: bool = True, use_rl: bool = True) -> TrainConfig:
        return TrainConfig(self.sft, self.grpo, self.train_pool, use_sft, use_rl)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


_SCALARS = {"seed": int, "out": str, "jobs": int, "standoff": float, "train_pool": int}
_SECTIONS = {f.name: f.default_factory for f in dataclasses.fields(RunConfig) if f.name not in _SCALARS}


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _tupled(v):
    if isinstance(v, list):
        return tuple(_tupled(x) for x in v)
    if isinstance(v, dict):
        return {k: _tupled(x) for k, x in v.items()}
    return v


def _coerce(section: str, key: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{section}.{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key}: expected a number, got {value!r}")
        return float(value)
    return _tupled(value)


def _build_section(name: str, raw: Any):
    cls_default = _SECTIONS[name]()
    if raw is None:
        return cls_default
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected a mapping, got {type(raw).__name__}")
    known = {f.name for f in dataclasses.fields(cls_default)}
    for k in raw:
        if k not in known:
            raise ConfigError(f"unknown key '{name}.{k}' (allowed: {', '.join(sorted(known))})")
    kwargs = {k: _coerce(name, k, v, getattr(cls_default, k)) for k, v in raw.items()}
    try:
        return dataclasses.replace(cls_default, **kwargs)
    except (ValueError, TypeError) as exc:
        keys = ", ".join(f"{name}.{k}" for k in sorted(kwargs))
        raise ConfigError(f"{name} ({keys}): {exc}") from None


def config_from_dict(doc: Optional[dict]) -> RunConfig:
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    kwargs = {}
    for k, v in doc.items():
        if k in _SCALARS:
            kwargs[k] = _coerce("root", k, v, getattr(RunConfig, k))
        elif k in _SECTIONS:
            kwargs[k] = _build_section(k, v)
        else:
            raise ConfigError(f"unknown key '{k}' (allowed: {', '.join(sorted([*_SCALARS, *_SECTIONS]))})")
    if kwargs.get("jobs", 1) < 1:
        raise ConfigError("jobs: must be >= 1")
    if kwargs.get("train_pool", 1) < 1:
        raise ConfigError("train_pool: must be >= 1")
    if kwargs.get("standoff", 1.5) <= 0:
        raise ConfigError("standoff: must be > 0")
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: malformed YAML: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    return config_from_dict(doc)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
