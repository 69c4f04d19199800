"""Run configuration: one JSON document, unknown keys rejected."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .backbone import BackboneConfig, ConfigError
from .numerics import LbfgsConfig
from .synthdata import DataConfig

DEFAULT_CONFIG = Path(__file__).with_name("configs") / "default.json"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 8
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    per_task: int = 2          # prompt components added per task
    prompt_length: int = 4
    n_select: int | None = None  # pixel prototypes per task; None -> number of patches
    tsc_sign: str = "attract"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("train.lr must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("train.beta1/beta2 must lie in [0, 1)")
        if self.per_task < 1 or self.prompt_length < 1:
            raise ConfigError("train.per_task and train.prompt_length must be >= 1")
        if self.n_select is not None and self.n_select < 1:
            raise ConfigError("train.n_select must be >= 1")
        if self.tsc_sign not in ("attract", "repel"):
            raise ConfigError("train.tsc_sign must be 'attract' or 'repel'")


@dataclass(frozen=True)
class RunConfig:
    num_tasks: int = 3
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    lbfgs: LbfgsConfig = field(default_factory=LbfgsConfig)

    def __post_init__(self):
        if self.num_tasks < 1:
            raise ConfigError("num_tasks must be >= 1")
        if (self.data.image_size, self.data.patch_size) != (
                self.backbone.image_size, self.backbone.patch_size):
            raise ConfigError("data.image_size/patch_size must match backbone")

    @property
    def n_select(self) -> int:
        return self.train.n_select or self.backbone.num_patches

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(
            self,
            backbone=dataclasses.replace(self.backbone, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
            data=dataclasses.replace(self.data, seed=seed),
        )

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        sections = {"backbone": BackboneConfig, "train": TrainConfig,
                    "data": DataConfig, "lbfgs": LbfgsConfig}
        top = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            if key not in top:
                raise ConfigError(f"unknown config key '{key}'")
            if key in sections:
                kwargs[key] = _build(sections[key], value, key)
            else:
                kwargs[key] = _coerce(key, value, int)
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def _coerce(name: str, value, typ):
    if typ is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"config key '{name}' must be an integer")
    return value


def _build(dc, raw, prefix: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"config key '{prefix}' must be an object")
    known = {f.name: f for f in fields(dc)}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown config key '{prefix}.{key}'")
        if known[key].type in ("int", int):
            _coerce(f"{prefix}.{key}", value, int)
        elif known[key].type in ("float", float) and (
                isinstance(value, bool) or not isinstance(value, (int, float))):
            raise ConfigError(f"config key '{prefix}.{key}' must be a number")
    try:
        return dc(**raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{prefix}' section: {exc}") from exc


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {p}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(raw)
