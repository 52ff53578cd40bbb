"""Run configuration tree: one JSON document configures every command."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field

from .model import ModelConfig, desk_model
from .simenv import EnvConfig
from .tactile import TactileConfig

SEED_ENV = "CONTACTDYN_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_traj: int = 100
    T: int = 64
    stride: int = 4

    def __post_init__(self):
        if self.n_traj < 0 or self.T < 1 or self.stride < 1:
            raise ValueError("need n_traj >= 0, T >= 1, stride >= 1")


@dataclass
class TrainSection:
    epochs: int = 20
    finetune_epochs: int = 40
    batch_size: int = 128
    lam: float = 1.0
    pretrain_lr: float = 1e-3
    finetune_lr: float = 1e-4
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 0 or self.finetune_epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0 < self.finetune_lr < self.pretrain_lr:
            raise ValueError("need 0 < finetune_lr < pretrain_lr")


@dataclass
class EvalSection:
    T_roll: int = 40  # 5 H
    h_apply: int | None = None
    contact_feedback: str = "self"
    samples: int = 4  # sampler draws averaged per prediction
    d_max_frac: float = 0.1  # ADD-S AUC threshold sweep, fraction of workspace
    success_frac: float = 0.05  # endpoint tolerance, fraction of workspace

    def __post_init__(self):
        if self.contact_feedback not in ("self", "oracle"):
            raise ValueError("contact_feedback must be 'self' or 'oracle'")
        if self.d_max_frac <= 0 or self.success_frac <= 0:
            raise ValueError("metric thresholds must be positive")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")


@dataclass
class BaselineSection:
    kinds: tuple[str, ...] = ("direct-mlp", "direct-unet", "diffusion", "diffusion-contact")
    seeds: tuple[int, ...] = (0, 1, 2)
    sim_epochs: int = 10
    real_epochs: int = 30


@dataclass
class RunConfig:
    seed: int = 0
    env: EnvConfig = field(default_factory=lambda: EnvConfig(n_points=64))
    tactile: TactileConfig = field(default_factory=TactileConfig)
    model: ModelConfig = field(default_factory=desk_model)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    baselines: BaselineSection = field(default_factory=BaselineSection)

    def to_dict(self) -> dict:
        return to_dict(self)


def to_dict(obj) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(obj)))


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {unknown}")
    kwargs = {}
    for name, value in data.items():
        tp = hints[name]
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, value, f"{path}.{name}".lstrip("."))
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    """Build a RunConfig; missing keys take defaults, unknown keys are errors."""
    return _build(RunConfig, data, "")


def load_config(path: str | None, environ=os.environ) -> RunConfig:
    data = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    cfg = from_dict(data)
    if environ.get(SEED_ENV):
        try:
            cfg.seed = int(environ[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    return cfg


def config_hash(obj) -> str:
    blob = json.dumps(to_dict(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
