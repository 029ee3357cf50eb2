"""Run configuration: one JSON document holding every knob of a run."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import AugmentConfig, Dataset, load_dataset, split_train_test, synth_dataset
from .errors import ConfigError
from .nn import ArchitectureConfig
from .trainer import TrainConfig


def build(cls, values: dict | None, where: str):
    """Instantiate dataclass ``cls`` from ``values``, rejecting unknown keys."""
    values = dict(values or {})
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 10
    per_class: int = 6
    noise: float = 0.1
    seed: int = 0


@dataclass(frozen=True)
class DataConfig:
    root: str | None = None
    synthetic: SyntheticSpec | None = None
    image_size: tuple | None = None
    train_fraction: float = 0.5
    split_seed: int = 0

    def __post_init__(self):
        if self.image_size is not None:
            object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
            if len(self.image_size) != 2 or min(self.image_size) < 1:
                raise ConfigError(f"data.image_size must be [height, width], got {self.image_size}")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("data.train_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class EvalConfig:
    trials: int = 10
    max_rank: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.trials < 1 or self.max_rank < 1:
            raise ConfigError("eval.trials and eval.max_rank must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    architecture: ArchitectureConfig = field(default_factory=ArchitectureConfig.desk)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig | None = None
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)
    threads: int = 1
    out: str = "run"

    def __post_init__(self):
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        c, h, w = self.architecture.input_shape
        if c != 3:
            raise ConfigError("network input must have 3 channels")
        img_h, img_w = self.image_size
        if self.augment is not None:
            if (self.augment.crop_height, self.augment.crop_width) != (h, w):
                raise ConfigError(f"crop {self.augment.crop_height}x{self.augment.crop_width} "
                                  f"does not match network input {h}x{w}")
            self.augment.check_fits(img_h, img_w)
        elif (img_h, img_w) != (h, w):
            raise ConfigError(f"image size {img_h}x{img_w} does not match network input {h}x{w} "
                              "and no crop is configured")

    @property
    def image_size(self) -> tuple:
        if self.data.image_size is not None:
            return self.data.image_size
        if self.augment is not None:
            r = self.augment.radius
            return (self.augment.crop_height + 2 * r, self.augment.crop_width + 2 * r)
        return self.architecture.input_shape[1:]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
        arch = d.get("architecture", "desk")
        if isinstance(arch, str):
            presets = {"desk": ArchitectureConfig.desk, "paper": ArchitectureConfig.paper}
            if arch not in presets:
                raise ConfigError(f"unknown architecture preset {arch!r}")
            arch = presets[arch]()
        else:
            arch = build(ArchitectureConfig, arch, "architecture")
        data = dict(d.get("data") or {})
        if data.get("synthetic") is not None:
            data["synthetic"] = build(SyntheticSpec, data["synthetic"], "data.synthetic")
        kwargs = dict(
            architecture=arch,
            train=build(TrainConfig, d.get("train"), "train"),
            augment=build(AugmentConfig, d["augment"], "augment") if d.get("augment") else None,
            eval=build(EvalConfig, d.get("eval"), "eval"),
            data=build(DataConfig, data, "data"),
        )
        for key in ("threads", "out"):
            if key in d:
                kwargs[key] = d[key]
        try:
            return cls(**kwargs)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["architecture"] = self.architecture.to_dict()
        if d["data"]["image_size"] is not None:
            d["data"]["image_size"] = list(d["data"]["image_size"])
        return d

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return RunConfig.from_dict(raw)


def resolve_dataset(cfg: RunConfig) -> Dataset:
    h, w = cfg.image_size
    if cfg.data.root is not None:
        if not Path(cfg.data.root).is_dir():
            raise ConfigError(f"dataset path {cfg.data.root} does not exist")
        return load_dataset(cfg.data.root, (h, w))
    if cfg.data.synthetic is not None:
        s = cfg.data.synthetic
        return synth_dataset(s.classes, s.per_class, s.noise, np.random.default_rng(s.seed), h, w)
    raise ConfigError("config names neither data.root nor data.synthetic")


def train_test(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    return split_train_test(resolve_dataset(cfg), cfg.data.train_fraction,
                            np.random.default_rng(cfg.data.split_seed))
