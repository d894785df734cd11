"""Run configuration: JSON in, validated dataclasses out.

Unknown keys are rejected at every level so a typo cannot silently fall
back to a default, and the resolved configuration is serialized into the
output directory of every run.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .errors import ConfigError
from .relabel import RelabelPolicy, ThresholdFn


def _take(raw, section, allowed):
    if not isinstance(raw, dict):
        raise ConfigError(f"{section}: expected an object, got {type(raw).__name__}")
    unknown = set(raw) - set(allowed)
    if unknown:
        raise ConfigError(f"{section}: unknown keys {sorted(unknown)}")
    return raw


@dataclass
class DataConfig:
    path: str | None = None
    classes: int = 4
    image_shape: tuple = (16, 16, 1)
    train_per_class: int | tuple = 512
    test_per_class: int = 256
    noise_rate: float = 0.2
    occlusion_prob: float = 0.5
    occluder_side: tuple = (2, 2)
    seed: int | None = None           # defaults to the run seed

    @classmethod
    def from_dict(cls, raw):
        raw = _take(raw, "dataset", cls.__dataclass_fields__)
        cfg = cls(**raw)
        cfg.image_shape = tuple(cfg.image_shape)
        cfg.occluder_side = tuple(cfg.occluder_side)
        if isinstance(cfg.train_per_class, list):
            cfg.train_per_class = tuple(cfg.train_per_class)
        return cfg


@dataclass
class ModelConfig:
    dim: int = 32
    heads: int = 4
    depth: int = 6
    patch_side: int = 4

    @classmethod
    def from_dict(cls, raw):
        raw = _take(raw, "model", cls.__dataclass_fields__)
        cfg = cls(**raw)
        if cfg.dim <= 0 or cfg.heads <= 0 or cfg.depth <= 0 or cfg.patch_side <= 0:
            raise ConfigError("model: dim, heads, depth, patch_side must be positive")
        if cfg.dim % cfg.heads:
            raise ConfigError(f"model: dim {cfg.dim} not divisible by heads {cfg.heads}")
        return cfg


@dataclass
class MgnConfig:
    enabled: bool = True
    depth: int = 6
    mask_ratio: float = 0.15
    alternations: int = 2000
    disc_steps: int = 2
    gen_steps: int = 1
    lr_gen: float = 3e-4
    lr_disc: float = 2e-3
    batch_size: int = 32

    @classmethod
    def from_dict(cls, raw):
        raw = _take(raw, "mgn", cls.__dataclass_fields__)
        cfg = cls(**raw)
        if cfg.enabled and not 0.0 < cfg.mask_ratio < 1.0:
            raise ConfigError(f"mgn: mask_ratio must lie in (0, 1), got {cfg.mask_ratio}")
        if cfg.alternations < 0 or cfg.disc_steps < 0 or cfg.gen_steps < 0:
            raise ConfigError("mgn: schedule counts must be nonnegative")
        if cfg.lr_gen <= 0 or cfg.lr_disc <= 0 or cfg.batch_size <= 0:
            raise ConfigError("mgn: learning rates and batch size must be positive")
        return cfg


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    lr_decay: float = 0.98

    @classmethod
    def from_dict(cls, raw):
        raw = _take(raw, "optimizer", cls.__dataclass_fields__)
        cfg = cls(**raw)
        if cfg.lr <= 0:
            raise ConfigError("optimizer: lr must be positive")
        if not 0.0 < cfg.lr_decay <= 1.0:
            raise ConfigError("optimizer: lr_decay must lie in (0, 1]")
        return cfg


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32

    @classmethod
    def from_dict(cls, raw):
        raw = _take(raw, "train", cls.__dataclass_fields__)
        cfg = cls(**raw)
        if cfg.epochs < 0 or cfg.batch_size <= 0:
            raise ConfigError("train: epochs must be >= 0 and batch_size positive")
        return cfg


@dataclass
class RelabelConfig:
    enabled: bool = False
    fn: str = "sigmoid"
    delta: float = 0.2
    gate: float = 0.9
    linear_slope: float = 0.5
    quadratic_coeff: float = 1.0
    sigmoid_amplitude: float = 0.5
    sigmoid_steepness: float = 10.0
    sigmoid_midpoint: float = 0.5

    @classmethod
    def from_dict(cls, raw):
        raw = _take(raw, "relabel", cls.__dataclass_fields__)
        cfg = cls(**raw)
        cfg.policy()  # validates fn name and numeric ranges
        return cfg

    def threshold_fn(self):
        return ThresholdFn(variant=self.fn, slope=self.linear_slope,
                           coeff=self.quadratic_coeff,
                           amplitude=self.sigmoid_amplitude,
                           steepness=self.sigmoid_steepness,
                           midpoint=self.sigmoid_midpoint)

    def policy(self):
        return RelabelPolicy(fn=self.threshold_fn(), delta=self.delta, gate=self.gate)


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/out"
    dataset: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    mgn: MgnConfig = field(default_factory=MgnConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    relabel: RelabelConfig = field(default_factory=RelabelConfig)
    ablate_seeds: tuple = (0, 1, 2)

    @classmethod
    def from_dict(cls, raw):
        raw = _take(raw, "config", cls.__dataclass_fields__)
        cfg = cls(
            seed=int(raw.get("seed", 0)),
            out_dir=str(raw.get("out_dir", "runs/out")),
            dataset=DataConfig.from_dict(raw.get("dataset", {})),
            model=ModelConfig.from_dict(raw.get("model", {})),
            mgn=MgnConfig.from_dict(raw.get("mgn", {})),
            optimizer=OptimizerConfig.from_dict(raw.get("optimizer", {})),
            train=TrainConfig.from_dict(raw.get("train", {})),
            relabel=RelabelConfig.from_dict(raw.get("relabel", {})),
            ablate_seeds=tuple(raw.get("ablate_seeds", (0, 1, 2))),
        )
        return cfg

    @classmethod
    def from_json(cls, path):
        try:
            with open(path) as f:
                raw = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from e
        return cls.from_dict(raw)

    def to_dict(self):
        out = asdict(self)
        out["dataset"]["image_shape"] = list(self.dataset.image_shape)
        return out

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    def dataset_spec(self):
        from .data import DatasetSpec
        d = self.dataset
        return DatasetSpec(
            classes=d.classes, image_shape=d.image_shape,
            patch_side=self.model.patch_side,
            train_per_class=d.train_per_class, test_per_class=d.test_per_class,
            noise_rate=d.noise_rate, occlusion_prob=d.occlusion_prob,
            occluder_side=d.occluder_side,
            seed=self.seed if d.seed is None else d.seed,
        ).validated()
