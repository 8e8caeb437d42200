"""Run configuration: one YAML file whose keys mirror :class:`RunConfig` exactly."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import yaml

from .model import ConfigError, ModelConfig


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    warmup_steps: int = 50
    lr_floor: float = 0.0
    grad_clip: float = 0.0
    cls_lr_mult: float = 1.0
    flip_p: float = 0.5
    scale_jitter: tuple = (0.8, 1.2)
    n_images: int = 286
    split_ratios: tuple = (0.70, 0.15, 0.15)
    min_instances: int = 1
    max_instances: int = 8
    precision: int = 64
    top_k: int = 100
    ablate_epochs: int = 3
    bench_warmup: int = 20
    bench_iters: int = 100

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.betas = tuple(float(b) for b in self.betas)
        self.scale_jitter = tuple(float(s) for s in self.scale_jitter)
        self.split_ratios = tuple(float(r) for r in self.split_ratios)

    def validate(self):
        self.model.validate()
        for name in ("epochs", "batch_size", "n_images", "bench_iters", "top_k"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if len(self.split_ratios) != 3 or abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split_ratios must be three numbers summing to 1, got {list(self.split_ratios)}")
        if min(self.split_ratios) < 0:
            raise ConfigError("split_ratios must be non-negative")
        if not 0.0 <= self.flip_p <= 1.0:
            raise ConfigError(f"flip_p must lie in [0, 1], got {self.flip_p}")
        if len(self.scale_jitter) != 2 or not 0 < self.scale_jitter[0] <= self.scale_jitter[1]:
            raise ConfigError(f"scale_jitter must be [low, high] with 0 < low <= high, got {list(self.scale_jitter)}")
        if not 1 <= self.min_instances <= self.max_instances <= 8:
            raise ConfigError("instances per image must satisfy 1 <= min_instances <= max_instances <= 8")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")
        if self.cls_lr_mult <= 0:
            raise ConfigError(f"cls_lr_mult must be positive, got {self.cls_lr_mult}")
        if self.lr <= 0 or self.weight_decay < 0 or self.warmup_steps < 0:
            raise ConfigError("lr must be positive; weight_decay and warmup_steps non-negative")
        return self

    @property
    def dtype(self):
        return "float32" if self.precision == 32 else "float64"

    def to_dict(self):
        d = asdict(self)
        d["model"] = self.model.to_dict()
        for k in ("betas", "scale_jitter", "split_ratios"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        if "model" in d:
            if not isinstance(d["model"], dict):
                raise ConfigError("'model' must be a mapping")
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d).validate()

    def replace(self, **changes):
        d = self.to_dict()
        model_changes = changes.pop("model", {})
        d.update(changes)
        d["model"].update(model_changes)
        return RunConfig.from_dict(d)


def load_config(path):
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(data)


def dump_config(cfg, path):
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
