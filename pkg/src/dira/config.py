"""Experiment configuration: a strict JSON schema with the sections

    dataset, augment, model, method, lambdas, schedule, optimizers, seed

plus ``output_dir`` and an optional ``ablation`` switch (di | dir | dira).
Unknown keys anywhere are rejected with the offending name, so typos fail
loudly instead of silently training the wrong thing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from dira.augment import AugmentationConfig
from dira.networks import EncoderSpec

METHODS = ("moco", "simsiam", "barlow", "classwise")
ABLATIONS = ("di", "dir", "dira")


def _strict_kwargs(cls, d: dict, where: str) -> dict:
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown key(s) in {where}: {sorted(unknown)}")
    return dict(d)


@dataclass(frozen=True)
class DatasetSection:
    path: str | None = None
    val_fraction: float = 0.1

    def validate(self) -> None:
        if not (0.0 < self.val_fraction < 1.0):
            raise ValueError(f"dataset.val_fraction must lie in (0, 1), got {self.val_fraction}")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSection":
        return cls(**_strict_kwargs(cls, d, "dataset"))

    def to_dict(self) -> dict:
        return {"path": self.path, "val_fraction": self.val_fraction}


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    in_channels: int = 1
    stage_channels: tuple[int, ...] = (16, 32, 64)
    stage_strides: tuple[int, ...] = (2, 2, 2)
    feature_dim: int = 128        # d_y
    projection_dim: int = 32      # d_z
    projector_hidden: int = 128
    predictor_hidden: int = 8
    classifier_hidden: int = 128
    groupnorm_groups: int = 8
    adversary_channels: tuple[int, int, int] = (16, 32, 64)

    def encoder_spec(self) -> EncoderSpec:
        return EncoderSpec(
            in_channels=self.in_channels,
            input_size=self.input_size,
            stage_channels=tuple(self.stage_channels),
            stage_strides=tuple(self.stage_strides),
            feature_dim=self.feature_dim,
            groupnorm_groups=self.groupnorm_groups,
        )

    def validate(self) -> None:
        self.encoder_spec().validate()
        if self.projection_dim < 2:
            raise ValueError(f"model.projection_dim must be >= 2, got {self.projection_dim}")
        for name in ("projector_hidden", "predictor_hidden", "classifier_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"model.{name} must be >= 1")
        if len(self.adversary_channels) != 3:
            raise ValueError("model.adversary_channels needs exactly three sizes")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kw = _strict_kwargs(cls, d, "model")
        for key in ("stage_channels", "stage_strides", "adversary_channels"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "in_channels": self.in_channels,
            "stage_channels": list(self.stage_channels),
            "stage_strides": list(self.stage_strides),
            "feature_dim": self.feature_dim,
            "projection_dim": self.projection_dim,
            "projector_hidden": self.projector_hidden,
            "predictor_hidden": self.predictor_hidden,
            "classifier_hidden": self.classifier_hidden,
            "groupnorm_groups": self.groupnorm_groups,
            "adversary_channels": list(self.adversary_channels),
        }


@dataclass(frozen=True)
class MethodConfig:
    name: str = "moco"
    temperature: float = 0.2
    queue_size: int = 4096
    ema_momentum: float = 0.999
    lambda_bt: float = 0.005
    stop_gradient: bool = True
    saturating_adversary: bool = False

    def validate(self) -> None:
        if self.name not in METHODS:
            raise ValueError(f"method.name must be one of {METHODS}, got {self.name!r}")
        if self.temperature <= 0:
            raise ValueError(f"method.temperature must be > 0, got {self.temperature}")
        if self.queue_size < 1:
            raise ValueError(f"method.queue_size must be >= 1, got {self.queue_size}")
        if not (0.0 <= self.ema_momentum <= 1.0):
            raise ValueError(f"method.ema_momentum must lie in [0, 1], got {self.ema_momentum}")
        if self.lambda_bt < 0:
            raise ValueError(f"method.lambda_bt must be >= 0, got {self.lambda_bt}")

    @classmethod
    def from_dict(cls, d: dict) -> "MethodConfig":
        return cls(**_strict_kwargs(cls, d, "method"))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "temperature": self.temperature,
            "queue_size": self.queue_size,
            "ema_momentum": self.ema_momentum,
            "lambda_bt": self.lambda_bt,
            "stop_gradient": self.stop_gradient,
            "saturating_adversary": self.saturating_adversary,
        }


@dataclass(frozen=True)
class Lambdas:
    dis: float = 1.0
    res: float = 10.0
    adv: float = 0.001

    def validate(self) -> None:
        for name in ("dis", "res", "adv"):
            if getattr(self, name) < 0:
                raise ValueError(f"lambdas.{name} must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "Lambdas":
        return cls(**_strict_kwargs(cls, d, "lambdas"))

    def to_dict(self) -> dict:
        return {"dis": self.dis, "res": self.res, "adv": self.adv}


@dataclass(frozen=True)
class StageSchedule:
    """Incremental pretraining: discrimination only, then + restoration,
    then + adversary."""

    stage1_epochs: int = 20
    stage2_epochs: int = 40
    stage3_epochs: int = 140
    batch_size: int = 64
    patience: int | None = None    # early stop within a stage; None = off

    def validate(self) -> None:
        for name in ("stage1_epochs", "stage2_epochs", "stage3_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"schedule.{name} must be >= 0")
        if self.total_epochs() < 1:
            raise ValueError("schedule must run at least one epoch")
        if self.batch_size < 1:
            raise ValueError(f"schedule.batch_size must be >= 1, got {self.batch_size}")
        if self.patience is not None and self.patience < 1:
            raise ValueError(f"schedule.patience must be >= 1 or null, got {self.patience}")

    def total_epochs(self) -> int:
        return self.stage1_epochs + self.stage2_epochs + self.stage3_epochs

    def stage_of(self, epoch: int) -> int:
        """1-based stage index for a 0-based epoch index."""
        if epoch < self.stage1_epochs:
            return 1
        if epoch < self.stage1_epochs + self.stage2_epochs:
            return 2
        return 3

    @classmethod
    def from_dict(cls, d: dict) -> "StageSchedule":
        return cls(**_strict_kwargs(cls, d, "schedule"))

    def to_dict(self) -> dict:
        return {
            "stage1_epochs": self.stage1_epochs,
            "stage2_epochs": self.stage2_epochs,
            "stage3_epochs": self.stage3_epochs,
            "batch_size": self.batch_size,
            "patience": self.patience,
        }


OPTIMIZER_FAMILIES = ("sgd_momentum", "adam")


@dataclass(frozen=True)
class OptimizerConfig:
    family: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9                      # sgd_momentum only
    betas: tuple[float, float] = (0.9, 0.999)  # adam only
    weight_decay: float = 0.0

    def validate(self) -> None:
        if self.family not in OPTIMIZER_FAMILIES:
            raise ValueError(f"optimizer family must be one of {OPTIMIZER_FAMILIES}, got {self.family!r}")
        if self.lr <= 0:
            raise ValueError(f"optimizer lr must be > 0, got {self.lr}")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError(f"optimizer momentum must lie in [0, 1), got {self.momentum}")
        b1, b2 = self.betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ValueError(f"optimizer betas must lie in [0, 1), got {self.betas}")
        if self.weight_decay < 0:
            raise ValueError(f"optimizer weight_decay must be >= 0, got {self.weight_decay}")

    @classmethod
    def from_dict(cls, d: dict, where: str = "optimizers") -> "OptimizerConfig":
        kw = _strict_kwargs(cls, d, where)
        if "betas" in kw:
            kw["betas"] = tuple(kw["betas"])
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "lr": self.lr,
            "momentum": self.momentum,
            "betas": list(self.betas),
            "weight_decay": self.weight_decay,
        }


def default_main_optimizer(method_name: str, batch_size: int) -> OptimizerConfig:
    """Per-method defaults for the encoder/decoder/head optimizer."""
    if method_name == "moco":
        return OptimizerConfig(family="sgd_momentum", lr=0.03, momentum=0.9, weight_decay=1e-4)
    if method_name == "simsiam":
        return OptimizerConfig(family="sgd_momentum", lr=0.05 * batch_size / 256.0,
                               momentum=0.9, weight_decay=1e-4)
    if method_name == "barlow":
        return OptimizerConfig(family="adam", lr=1e-3, weight_decay=1e-6)
    if method_name == "classwise":
        return OptimizerConfig(family="adam", lr=1e-3)
    raise ValueError(f"unknown method {method_name!r}")


def default_adversary_optimizer() -> OptimizerConfig:
    return OptimizerConfig(family="adam", lr=2e-4, betas=(0.5, 0.999))


@dataclass(frozen=True)
class OptimizerSection:
    main: OptimizerConfig | None = None       # None = per-method default
    adversary: OptimizerConfig | None = None

    def validate(self) -> None:
        if self.main is not None:
            self.main.validate()
        if self.adversary is not None:
            self.adversary.validate()

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerSection":
        known = {"main", "adversary"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown key(s) in optimizers: {sorted(unknown)}")
        main = OptimizerConfig.from_dict(d["main"], "optimizers.main") if d.get("main") else None
        adv = OptimizerConfig.from_dict(d["adversary"], "optimizers.adversary") if d.get("adversary") else None
        return cls(main=main, adversary=adv)

    def to_dict(self) -> dict:
        return {
            "main": self.main.to_dict() if self.main else None,
            "adversary": self.adversary.to_dict() if self.adversary else None,
        }

    def resolved(self, method_name: str, batch_size: int) -> tuple[OptimizerConfig, OptimizerConfig]:
        main = self.main or default_main_optimizer(method_name, batch_size)
        adv = self.adversary or default_adversary_optimizer()
        return main, adv


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str | None = None
    ablation: str = "dira"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    method: MethodConfig = field(default_factory=MethodConfig)
    lambdas: Lambdas = field(default_factory=Lambdas)
    schedule: StageSchedule = field(default_factory=StageSchedule)
    optimizers: OptimizerSection = field(default_factory=OptimizerSection)

    def validate(self) -> None:
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        self.dataset.validate()
        self.augment.validate()
        self.model.validate()
        self.method.validate()
        self.lambdas.validate()
        self.schedule.validate()
        self.optimizers.validate()
        if self.augment.out_size != self.model.input_size:
            raise ValueError(
                f"augment.out_size {self.augment.out_size} must equal "
                f"model.input_size {self.model.input_size}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {"seed", "output_dir", "ablation", "dataset", "augment", "model",
                 "method", "lambdas", "schedule", "optimizers"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown top-level config key(s): {sorted(unknown)}")
        return cls(
            seed=int(d.get("seed", 0)),
            output_dir=d.get("output_dir"),
            ablation=d.get("ablation", "dira"),
            dataset=DatasetSection.from_dict(d.get("dataset", {})),
            augment=AugmentationConfig.from_dict(d.get("augment", {})),
            model=ModelConfig.from_dict(d.get("model", {})),
            method=MethodConfig.from_dict(d.get("method", {})),
            lambdas=Lambdas.from_dict(d.get("lambdas", {})),
            schedule=StageSchedule.from_dict(d.get("schedule", {})),
            optimizers=OptimizerSection.from_dict(d.get("optimizers", {})),
        )

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "ablation": self.ablation,
            "dataset": self.dataset.to_dict(),
            "augment": self.augment.to_dict(),
            "model": self.model.to_dict(),
            "method": self.method.to_dict(),
            "lambdas": self.lambdas.to_dict(),
            "schedule": self.schedule.to_dict(),
            "optimizers": self.optimizers.to_dict(),
        }

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as e:
                raise ValueError(f"config {path} is not valid JSON: {e}") from e
        cfg = cls.from_dict(raw)
        cfg.validate()
        return cfg

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n",
                              encoding="utf-8")
