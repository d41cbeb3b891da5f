"""Experiment configuration: one YAML file, strict keys, documented defaults."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .envs import DEFAULT_PARAMS, DISPARITIES, FACTORS, EnvParams, with_magnitudes
from .models import ModelConfig
from .offline import OfflineConfig
from .policy import PolicyConfig


class ConfigError(ValueError):
    pass


def _strict(cls, d: Optional[dict], where: str):
    d = dict(d or {})
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**d)


@dataclass
class DataConfig:
    factors: list = field(default_factory=lambda: ["wind"])
    train_magnitudes: dict = field(default_factory=dict)   # factor -> list; empty means level midpoints
    orientations: int = 4
    include_source: bool = True
    n_tasks: int = 48
    n_waypoints: int = 2
    task_seed: int = 0
    episodes_per_pair: int = 1
    data_seed: int = 0
    H: int = 10
    policy_tasks: int = 32
    policy_task_seed: int = 7


@dataclass
class EvalConfig:
    eval_factors: list = field(default_factory=lambda: ["wind"])
    disparities: list = field(default_factory=lambda: list(DISPARITIES))
    modes: list = field(default_factory=lambda: ["full", "fix"])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    episodes: int = 50
    eval_tasks: int = 4
    eval_task_seed: int = 100
    shots: int = 5
    domain_seed: int = 3
    m: int = 4
    temperature: float = 1.0
    fractions: list = field(default_factory=lambda: [0.08, 0.2, 1.0])
    sweep_tasks: int = 25
    plots: bool = False


@dataclass
class ExperimentConfig:
    magnitudes: dict = field(default_factory=dict)          # factor -> {level: value} overrides
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    offline: OfflineConfig = field(default_factory=OfflineConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "ExperimentConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
        try:
            model = ModelConfig.from_dict(d.get("model") or {})
            offline = OfflineConfig.from_dict(d.get("offline") or {})
            policy = PolicyConfig.from_dict(d.get("policy") or {})
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
        cfg = cls(magnitudes=dict(d.get("magnitudes") or {}),
                  data=_strict(DataConfig, d.get("data"), "data"),
                  model=model, offline=offline, policy=policy,
                  eval=_strict(EvalConfig, d.get("eval"), "eval"))
        cfg.validate()
        return cfg

    def validate(self):
        for f in list(self.data.factors) + list(self.eval.eval_factors):
            if f not in FACTORS:
                raise ConfigError(f"unknown factor {f!r}")
        for lv in self.eval.disparities:
            if lv not in DISPARITIES:
                raise ConfigError(f"unknown disparity {lv!r}")
        if self.data.H != self.model.H:
            raise ConfigError("data.H and model.H must agree")
        if not self.eval.seeds:
            raise ConfigError("at least one seed is required")
        self.env_params()

    def env_params(self) -> EnvParams:
        try:
            return with_magnitudes(DEFAULT_PARAMS, self.magnitudes)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig.from_dict({})
    text = Path(path).read_text()
    raw = yaml.safe_load(text)
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("config file must hold a mapping")
    return ExperimentConfig.from_dict(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
