"""Run configuration: a strict JSON document validated before any work starts."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .ablations import ABLATIONS
from .network import ConfigError, ModelConfig, desk_config

SEED_ENV = "CAUSALPIX_SEED"


@dataclass
class OptimizerSettings:
    lr: float = 1e-3
    lr_decay: float = 0.999995
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ema_decay: float = 0.9995


@dataclass
class DataSettings:
    cifar_path: str | None = None
    n_total: int = 400
    n_eval: int = 100
    downscale: int = 2
    synthetic_seed: int = 0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=desk_config)
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    data: DataSettings = field(default_factory=DataSettings)
    seed: int = 0
    steps: int = 2000
    batch_size: int = 16
    log_every: int = 10
    eval_every: int = 100
    out_dir: str = "runs/default"
    ablation: str | None = None
    use_ema_eval: bool = False
    wall_clock: bool = False

    def validate(self) -> None:
        """Raise ConfigError naming the first offending field."""
        self.model.validate()
        o = self.optimizer
        if not o.lr >= 0:
            raise ConfigError("optimizer.lr must be >= 0")
        for name in ("lr_decay", "beta1", "beta2", "ema_decay"):
            if not 0.0 <= getattr(o, name) <= 1.0:
                raise ConfigError(f"optimizer.{name} must lie in [0, 1]")
        if not o.eps > 0:
            raise ConfigError("optimizer.eps must be positive")
        d = self.data
        if d.n_total < 2 or not 0 < d.n_eval < d.n_total:
            raise ConfigError("data.n_eval must lie strictly between 0 and data.n_total")
        if d.downscale < 1 or 32 % d.downscale:
            raise ConfigError("data.downscale must divide 32")
        side = 32 // d.downscale
        if self.model.use_downsampling and side % 4:
            raise ConfigError("data.downscale leaves an image side not divisible by 4")
        if d.cifar_path is not None and not Path(d.cifar_path).is_file():
            raise ConfigError(f"data.cifar_path does not exist: {d.cifar_path}")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.log_every < 0 or self.eval_every < 0:
            raise ConfigError("log_every and eval_every must be >= 0")
        if self.ablation is not None and self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")

    def resolved(self) -> RunConfig:
        """Copy with absolute paths and the seed override from the environment."""
        out = dataclasses.replace(self)
        env = os.environ.get(SEED_ENV)
        if env is not None:
            try:
                out.seed = int(env)
            except ValueError as exc:
                raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
        out.out_dir = str(Path(self.out_dir).resolve())
        if self.data.cifar_path is not None:
            out.data = dataclasses.replace(self.data, cifar_path=str(Path(self.data.cifar_path).resolve()))
        out.validate()
        return out

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        _reject_unknown("", d, cls)
        kwargs = dict(d)
        if "model" in d:
            _reject_unknown("model.", d["model"], ModelConfig)
            try:
                kwargs["model"] = desk_config().replace(**d["model"])
            except TypeError as exc:
                raise ConfigError(f"model: {exc}") from exc
        for key, sub in (("optimizer", OptimizerSettings), ("data", DataSettings)):
            if key in d:
                _reject_unknown(f"{key}.", d[key], sub)
                kwargs[key] = sub(**d[key])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> RunConfig:
        with open(path, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(doc)


def _reject_unknown(prefix: str, d, cls) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'} must be an object")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown config key {prefix}{unknown[0]}")
