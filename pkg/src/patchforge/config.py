"""Run configuration: one JSON document, validated up front, unknown keys rejected."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .datagen import Intrinsics, ScanConfig
from .net import ModelConfig
from .train import LossConfig, TrainConfig


class ConfigError(ValueError):
    def __init__(self, message, key=None):
        self.key = key
        super().__init__(message)


@dataclass
class Paths:
    meshes: str | None = None
    data: str | None = None
    noisy_data: str | None = None
    ckpt: str | None = None
    out: str | None = None


@dataclass
class ScanSection:
    views: int = 20
    partial_views: int = 4
    res: int = 32
    trunc: float = 2.5
    padding: float = 0.05
    width: int = 240
    fov_deg: float = 50.0
    test_categories: list = field(default_factory=list)

    def scan_config(self) -> ScanConfig:
        return ScanConfig(self.views, self.partial_views, self.res, self.trunc, self.padding,
                          intrinsics=Intrinsics(self.width, self.width, self.fov_deg))


@dataclass
class ModelSection:
    d: int = 128
    resolutions: list = field(default_factory=lambda: [32, 8, 4])
    channels: int = 16
    norm: str = "group"
    norm_groups: int = 8
    k_max_priors: int = 3
    decoder_channels: int = 8
    bandwidth_scale: float = 0.5


@dataclass
class StageSection:
    lr0: float = 0.001
    epochs: int = 80
    lr_halve_epoch: int = 50
    batch_size: int = 32
    max_steps: int | None = None
    max_partials: int | None = None
    loss: dict = field(default_factory=dict)


@dataclass
class TrainSection:
    s1: StageSection = field(default_factory=StageSection)
    s2: StageSection = field(default_factory=StageSection)
    finetune: StageSection = field(default_factory=lambda: StageSection(batch_size=16))


@dataclass
class EvalSection:
    n_points: int = 10_000
    seed: int = 0
    split: str = "test"
    export_meshes: str | None = None


@dataclass
class AblateSection:
    variants: list = field(default_factory=lambda: ["32-only", "8-only", "4-only", "no-attention",
                                                    "fixed-priors", "full"])


@dataclass
class RunConfig:
    seed: int = 0
    paths: Paths = field(default_factory=Paths)
    scan: ScanSection = field(default_factory=ScanSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ablate: AblateSection = field(default_factory=AblateSection)

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(d=m.d, resolutions=list(m.resolutions), channels=m.channels, norm=m.norm,
                           norm_groups=m.norm_groups, k_max_priors=m.k_max_priors,
                           decoder_channels=m.decoder_channels, resolution=self.scan.res,
                           truncation=self.scan.trunc)

    def train_config(self, stage: str) -> TrainConfig:
        sec = {"s2": self.train.s2, "finetune": self.train.finetune}.get(stage, self.train.s1)
        return TrainConfig(lr0=sec.lr0, epochs=sec.epochs, lr_halve_epoch=sec.lr_halve_epoch,
                           batch_size=sec.batch_size, seed=self.seed, stage=stage, max_steps=sec.max_steps,
                           loss=LossConfig(**sec.loss))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be an object", path)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        full = f"{path}.{key}" if path else key
        if key not in fields:
            raise ConfigError(f"unknown config key {full!r}", full)
        ftype = fields[key].type
        sub = {"Paths": Paths, "ScanSection": ScanSection, "ModelSection": ModelSection,
               "TrainSection": TrainSection, "StageSection": StageSection, "EvalSection": EvalSection,
               "AblateSection": AblateSection}.get(ftype if isinstance(ftype, str) else getattr(ftype, "__name__", ""))
        kwargs[key] = _build(sub, value, full) if sub else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {path or 'config'}: {exc}", path) from exc


def _check_loss(cfg: RunConfig):
    allowed = {f.name for f in dataclasses.fields(LossConfig)}
    for stage in ("s1", "s2", "finetune"):
        for key in getattr(cfg.train, stage).loss:
            if key not in allowed:
                raise ConfigError(f"unknown config key 'train.{stage}.loss.{key}'", f"train.{stage}.loss.{key}")


def parse_config(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    _check_loss(cfg)
    try:
        cfg.model_config()
        cfg.train_config("s1_8")
        cfg.train_config("s2")
        cfg.train_config("finetune")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(data)
