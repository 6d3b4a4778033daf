"""Experiment configuration."""

import json
import logging
import os
from typing import List, Optional, Tuple

import pydantic
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

logger = logging.getLogger(__name__)

METHODS = (
    "magnitude",
    "snip",
    "grasp",
    "crop",
    "crop_s",
    "early_crop",
    "imp",
    "snip_after",
    "edge_popup",
    "edge_popup_after",
    "snr",
    "snr_s",
)


class ConfigError(ValueError):
    """Raised for invalid or unreadable configurations."""

    pass


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(Section):
    arch: str = Field("mlp3", pattern="^(mlp3|convs)$")
    hidden: Tuple[int, ...] = (300, 100)
    channels: Tuple[int, ...] = (8, 16)
    bayesian: bool = False
    inferences: int = Field(5, ge=1)


class DataSection(Section):
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    ood_images: Optional[str] = None
    holdout: Tuple[int, ...] = (5, 6, 7, 8, 9)
    train_size: int = Field(5000, ge=1)
    test_size: int = Field(2000, ge=1)
    side: int = Field(28, ge=2)
    noise: float = Field(0.1, ge=0.0)
    spread: float = Field(0.5, ge=0.0, lt=1.0)
    corruption: str = "gaussian_noise"
    severity: int = Field(5, ge=1, le=5)

    @field_validator("train_images", "train_labels", "test_images", "test_labels", "ood_images")
    @classmethod
    def _exists(cls, path):
        if path is not None and not os.path.exists(path):
            raise ValueError("No such file: %s" % path)
        return path

    @model_validator(mode="after")
    def _paired(self):
        paths = (self.train_images, self.train_labels, self.test_images, self.test_labels)
        given = [p is not None for p in paths]
        if any(given) and not all(given):
            raise ValueError("Train and test images and labels must be configured together")
        return self

    @property
    def synthetic(self):
        return self.train_images is None


class TrainSection(Section):
    epochs: int = Field(10, ge=0)
    batch_size: int = Field(512, ge=1)
    optimizer: str = Field("adam", pattern="^(adam|sgd)$")
    lr: float = Field(2e-3, gt=0)
    rewind_epoch: Optional[int] = Field(None, ge=0)


class MethodSection(Section):
    name: str
    scope: Optional[str] = Field(None, pattern="^(global|local)$")
    epoch: int = Field(2, ge=0)
    cycles: int = Field(3, ge=1)
    score_batches: Optional[int] = Field(None, ge=1)
    finetune_epochs: int = Field(0, ge=0)
    objective: str = Field("ce", pattern="^(ce|aa|ood|ds)$")
    edge_epochs: Optional[int] = Field(None, ge=0)
    schedule: Optional[str] = Field(None, pattern="^(before|during|after)$")

    @property
    def label(self):
        return self.name if self.objective == "ce" else "%s-%s" % (self.name, self.objective)

    @field_validator("name")
    @classmethod
    def _known(cls, name):
        if name not in METHODS:
            raise ValueError("Unknown method %r" % name)
        return name


class PruneSection(Section):
    methods: List[MethodSection] = Field(
        default_factory=lambda: [
            MethodSection(name=m) for m in ("snip", "grasp", "crop", "imp", "edge_popup")
        ]
    )
    sparsities: List[float] = [0.5, 0.8, 0.9, 0.95]
    edge_lr: float = Field(0.01, gt=0)
    lam: float = Field(6.0, ge=0)
    sigma: float = Field(0.1, ge=0)

    @field_validator("methods", mode="before")
    @classmethod
    def _names(cls, methods):
        return [{"name": m} if isinstance(m, str) else m for m in methods]

    @field_validator("sparsities")
    @classmethod
    def _range(cls, sparsities):
        for s in sparsities:
            if not 0.0 <= s < 1.0:
                raise ValueError("Sparsity %r outside [0, 1)" % s)
        return sparsities


class AttackSection(Section):
    epsilon: float = Field(8.0, gt=0)
    norms: Tuple[str, ...] = ("linf", "l2")


class DetectSection(Section):
    p: float = Field(5.0, gt=0)
    augmentations: int = Field(15, ge=0)
    sigma_floor: float = Field(1e-8, gt=0)
    batch_sizes: Tuple[int, ...] = (100, 5, 2, 1)
    test_loss: str = Field("kl_uniform", pattern="^(pseudo_label|kl_uniform)$")
    profile_batches: Optional[int] = Field(None, ge=2)
    lipschitz_samples: int = Field(20, ge=1)
    lipschitz_iterations: int = Field(20, ge=1)


class EnsembleSection(Section):
    members: int = Field(3, ge=2)
    sparsities: List[float] = [0.5, 0.8]
    sweep: bool = False

    @field_validator("sparsities")
    @classmethod
    def _range(cls, sparsities):
        for s in sparsities:
            if not 0.0 <= s < 1.0:
                raise ValueError("Sparsity %r outside [0, 1)" % s)
        return sparsities


class ReportSection(Section):
    workers: int = Field(4, ge=1)
    wall_time: bool = True


class ExperimentConfig(Section):
    """Everything a harness command needs, read from one JSON file."""

    model: ModelSection = Field(default_factory=ModelSection)
    data: DataSection = Field(default_factory=DataSection)
    train: TrainSection = Field(default_factory=TrainSection)
    prune: PruneSection = Field(default_factory=PruneSection)
    attack: AttackSection = Field(default_factory=AttackSection)
    detect: DetectSection = Field(default_factory=DetectSection)
    ensemble: EnsembleSection = Field(default_factory=EnsembleSection)
    report: ReportSection = Field(default_factory=ReportSection)
    seeds: List[int] = [0, 1, 2]
    out: str = "out"

    @field_validator("seeds")
    @classmethod
    def _distinct(cls, seeds):
        if not seeds:
            raise ValueError("At least one seed required")
        if len(set(seeds)) != len(seeds):
            raise ValueError("Seeds must be distinct")
        return seeds

    @model_validator(mode="after")
    def _schedule(self):
        for method in self.prune.methods:
            during = method.name == "early_crop" or method.schedule == "during"
            if during and method.epoch > self.train.epochs:
                raise ValueError(
                    "Pruning epoch %d beyond %d training epochs" % (method.epoch, self.train.epochs)
                )
        rewind = self.train.rewind_epoch
        if rewind is not None and rewind > self.train.epochs:
            raise ValueError("Rewind epoch %d beyond %d training epochs" % (rewind, self.train.epochs))
        return self


def load_config(path=None, **overrides):
    """Read and validate a configuration file.

    `overrides` replace top-level keys, e.g. ``seeds`` or ``out``.

    """
    raw = {}
    if path is not None:
        try:
            with open(path) as f:
                raw = json.load(f)
        except (OSError, ValueError) as e:
            raise ConfigError("Cannot read %s: %s" % (path, e))
    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        config = ExperimentConfig.model_validate(raw)
    except pydantic.ValidationError as e:
        raise ConfigError(str(e))
    logger.debug("Loaded configuration %s", config.model_dump_json())
    return config
