"""Run configuration: one JSON document describing a training run."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .credit import GaeParams
from .envs import EnvSpec
from .exceptions import ConfigError
from .optim import ClipConfig
from .policy import FeatureSpec
from .segmentation import SegStrategy

ALGOS = ("sapo", "ppo", "grpo", "naive-is")


def _default_env():
    return EnvSpec("chain-arith", vocab_size=12, max_len=5, task_params={"n_steps": 5, "modulus": 10})


@dataclass(frozen=True)
class RunConfig:
    env: EnvSpec = field(default_factory=_default_env)
    env_seed: int = 0
    algo: str = "sapo"
    seg_strategy: SegStrategy = field(default_factory=lambda: SegStrategy("entropy-topk", k_percent=30.0))
    gae: GaeParams = field(default_factory=GaeParams)
    clip: ClipConfig = field(default_factory=ClipConfig)
    features: FeatureSpec = field(default_factory=FeatureSpec)
    group_size: int = 8
    normalize_std: bool = True
    batch_size: int = 64
    minibatch_count: int = 4
    total_steps: int = 2000
    lr_policy: float = 1e-2
    lr_value: float = 1e-2
    lr_decay: str = "none"
    lr_decay_steps: int = 100
    value_optimizer: str = "adam"
    aggregation: str = "trajectory"
    seed: int = 0
    output_dir: str = "runs/default"
    dump_interval: int = 0

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ConfigError(f"unknown algo {self.algo!r}; expected one of {ALGOS}")
        for name in ("batch_size", "minibatch_count", "group_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.total_steps < 0 or self.dump_interval < 0:
            raise ConfigError("total_steps and dump_interval must be non-negative")
        if self.minibatch_count > self.batch_size:
            raise ConfigError("minibatch_count cannot exceed batch_size")
        if self.lr_policy < 0 or self.lr_value < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.lr_decay not in ("none", "linear", "inverse-time"):
            raise ConfigError("lr_decay must be 'none', 'linear' or 'inverse-time'")
        if self.lr_decay_steps < 1:
            raise ConfigError("lr_decay_steps must be >= 1")
        if self.value_optimizer not in ("adam", "sgd"):
            raise ConfigError("value_optimizer must be 'adam' or 'sgd'")
        if self.aggregation not in ("trajectory", "token"):
            raise ConfigError("aggregation must be 'trajectory' or 'token'")
        if self.algo == "grpo":
            if self.group_size < 2 or self.batch_size % self.group_size:
                raise ConfigError("grpo needs group_size >= 2 dividing batch_size")

    # serialization

    def to_dict(self) -> dict:
        return {
            "env": self.env.to_dict(),
            "env_seed": self.env_seed,
            "algo": self.algo,
            "seg_strategy": self.seg_strategy.to_dict(),
            "gae": {"gamma": self.gae.gamma, "lambda": self.gae.lam},
            "clip": {"epsilon": self.clip.epsilon, "kl_coef": self.clip.kl_coef, "kl_kind": self.clip.kl_kind},
            "features": {"window": self.features.window, "n_features": self.features.n_features},
            **{f.name: getattr(self, f.name) for f in fields(self)
               if f.name not in ("env", "seg_strategy", "gae", "clip", "features", "env_seed", "algo")},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        kw = {}
        try:
            if "env" in d:
                kw["env"] = EnvSpec.from_dict(d.pop("env"))
            if "seg_strategy" in d:
                kw["seg_strategy"] = SegStrategy.from_dict(d.pop("seg_strategy"))
            if "gae" in d:
                g = d.pop("gae")
                kw["gae"] = GaeParams(gamma=g.get("gamma", 1.0), lam=g.get("lambda", 0.99))
            if "clip" in d:
                kw["clip"] = ClipConfig(**d.pop("clip"))
            if "features" in d:
                kw["features"] = FeatureSpec(**d.pop("features"))
            return cls(**kw, **d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text())

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def replace(self, **changes) -> "RunConfig":
        return replace(self, **changes)
