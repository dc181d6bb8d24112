"""Run configuration: one JSON file, flag overrides on top, resolved copy
written next to every run's outputs."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from premixer.errors import ConfigError


@dataclass
class OptimConfig:
    lr: float = 0.005
    batch: int = 32
    epochs: int = 100
    patience: int = 10


@dataclass
class PretrainConfig:
    lr: float = 1e-3
    batch: int = 8
    epochs: int = 20
    stride: int = 12
    dropout: float = 0.0


@dataclass
class Ablation:
    no_pretrain: bool = False
    no_cl: bool = False
    no_context: bool = False
    no_stpe: bool = False


@dataclass
class RunConfig:
    data: str | None = None
    T: int = 12
    horizon: int = 12
    L: int = 12
    T_long: int = 672
    D: int = 96
    d_model: int = 32
    d_pe: int = 16
    d_emb: int = 32
    d_ctx: int = 64
    spatial_layers: int = 2
    ff_mult: int = 2
    dropout: float = 0.1
    mask_ratio: float = 0.5
    spatial_mode: str = "structured"
    aggregation: str = "mean"
    aggregate_factor: int = 1
    steps_per_day: int = 96
    split: list = field(default_factory=lambda: [6, 2, 2])
    time_features: bool = False
    mape_min_truth: float = 1.0
    train_stride: int = 1
    eval_stride: int = 1
    train_subset: int | None = None
    seed: int = 0
    optim: OptimConfig = field(default_factory=OptimConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    ablation: Ablation = field(default_factory=Ablation)

    def validate(self) -> "RunConfig":
        if self.L < 1 or self.T_long % self.L:
            raise ConfigError(f"T_long={self.T_long} must be a multiple of L={self.L}")
        if self.T != self.L:
            raise ConfigError(f"short window T={self.T} must equal patch length L={self.L}")
        if self.T_long < self.T:
            raise ConfigError("T_long must be at least T")
        if self.d_pe % 4:
            raise ConfigError(f"d_pe={self.d_pe} must be a multiple of 4")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.spatial_mode not in ("structured", "basic"):
            raise ConfigError(f"spatial_mode must be structured or basic, got {self.spatial_mode!r}")
        if self.aggregation not in ("mean", "sum"):
            raise ConfigError(f"aggregation must be mean or sum, got {self.aggregation!r}")
        if len(self.split) != 3:
            raise ConfigError("split needs three ratios (train, val, test)")
        for name in ("horizon", "D", "d_model", "d_emb", "d_ctx", "aggregate_factor",
                     "train_stride", "eval_stride", "steps_per_day", "ff_mult"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.spatial_layers < 0:
            raise ConfigError("spatial_layers must be >= 0")
        for section in (self.optim, self.pretrain):
            if section.lr <= 0 or section.batch < 1 or section.epochs < 0:
                raise ConfigError(f"invalid optimizer settings {section}")
        if not 0.0 <= self.dropout < 1.0 or not 0.0 <= self.pretrain.dropout < 1.0:
            raise ConfigError("dropout rates must lie in [0, 1)")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d).validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(d)

    def replace(self, **overrides) -> "RunConfig":
        """Copy with dotted-key overrides, e.g. ``{"optim.lr": 0.01}``."""
        d = self.to_dict()
        for key, value in overrides.items():
            if value is None:
                continue
            node = d
            *path, leaf = key.split(".")
            for part in path:
                node = node[part]
            if leaf not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[leaf] = value
        return RunConfig.from_dict(d)


def _build(cls, d):
    if not isinstance(d, dict):
        raise ConfigError(f"expected an object for {cls.__name__}, got {type(d).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        sub = {"optim": OptimConfig, "pretrain": PretrainConfig, "ablation": Ablation}.get(name)
        kwargs[name] = _build(sub, value) if sub and cls is RunConfig else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
