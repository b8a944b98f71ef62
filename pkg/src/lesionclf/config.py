"""Experiment configuration: one nested YAML file drives every CLI command.

Defaults encode the reference protocol: lr 1e-4, batch 64, dropout 0.5, GAP
on, class-weighted focal loss on, 5 folds, 10 TTA views.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .augment import TransformSpec
from .catalog import ClassWeights, class_distribution, compute_class_weights
from .errors import ConfigError
from .labels import ALL_LABELS, ClassLabel
from .models import ModelSpec
from .training import TrainConfig

DATA_ROOT_ENV = "LESIONCLF_DATA_ROOT"


@dataclass(frozen=True)
class DatasetConfig:
    metadata_path: Path
    images_root: Path


@dataclass(frozen=True)
class SplitConfig:
    seed: int = 42
    test_fraction: float = 0.2
    val_fraction: float = 0.2
    k: int = 5


@dataclass(frozen=True)
class EnsembleConfig:
    tta_n: int = 10
    tta_seed: int = 0


@dataclass(frozen=True)
class TrainSection:
    """TrainConfig fields plus the weight scheme (weights themselves are
    computed from the catalog at command time)."""

    initial_lr: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 50
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    min_lr: float = 1e-7
    loss: str = "focal"
    gamma: float = 2.0
    weight_scheme: str = "balanced"  # balanced | manual | none
    manual_weights: dict[str, float] = field(default_factory=dict)
    use_augment: bool = True
    seed: int = 0
    monitor: str = "val_accuracy"


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig
    output_dir: Path
    split: SplitConfig = SplitConfig()
    augmentation: TransformSpec = TransformSpec(cutout=True)
    model: ModelSpec = ModelSpec()
    train: TrainSection = TrainSection()
    ensemble: EnsembleConfig = EnsembleConfig()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dataset"] = {k: str(v) for k, v in d["dataset"].items()}
        d["output_dir"] = str(self.output_dir)
        d["augmentation"]["crop_scale"] = list(self.augmentation.crop_scale)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:8]

    def train_config(self, weights: ClassWeights | None) -> TrainConfig:
        t = self.train
        return TrainConfig(
            initial_lr=t.initial_lr,
            batch_size=t.batch_size,
            max_epochs=t.max_epochs,
            plateau_factor=t.plateau_factor,
            plateau_patience=t.plateau_patience,
            min_lr=t.min_lr,
            loss=t.loss,
            gamma=t.gamma,
            class_weights=weights,
            use_dropout=self.model.dropout_rate > 0,
            use_augment=t.use_augment,
            use_gap=self.model.use_gap,
            seed=t.seed,
            monitor=t.monitor,
        )


def _build_section(cls, data: dict, where: str):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - fields
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)} (allowed: {sorted(fields)})")
    coerced = dict(data)
    for f in dataclasses.fields(cls):
        if f.name in coerced and f.type in ("Path", Path):
            coerced[f.name] = Path(coerced[f.name])
        if f.name == "crop_scale" and f.name in coerced:
            coerced[f.name] = tuple(coerced[f.name])
    try:
        return cls(**coerced)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from e


def load_config(path: Path | str) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"malformed config {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping of sections")

    known = {"dataset", "split", "augmentation", "model", "train", "ensemble", "output_dir"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    if "dataset" not in raw or "output_dir" not in raw:
        raise ConfigError(f"{path}: config requires 'dataset' and 'output_dir'")

    dataset = _build_section(DatasetConfig, raw["dataset"], "dataset")
    root_override = os.environ.get(DATA_ROOT_ENV)
    if root_override:
        dataset = dataclasses.replace(dataset, images_root=Path(root_override))

    return ExperimentConfig(
        dataset=dataset,
        output_dir=Path(raw["output_dir"]),
        split=_build_section(SplitConfig, raw.get("split", {}), "split"),
        augmentation=_build_section(TransformSpec, raw.get("augmentation", {}), "augmentation"),
        model=_build_section(ModelSpec, raw.get("model", {}), "model"),
        train=_build_section(TrainSection, raw.get("train", {}), "train"),
        ensemble=_build_section(EnsembleConfig, raw.get("ensemble", {}), "ensemble"),
    )


def resolve_weights(config: ExperimentConfig, records) -> ClassWeights | None:
    """Class weights per the configured scheme, from full-catalog image counts."""
    scheme = config.train.weight_scheme
    if scheme == "none":
        return None
    if scheme == "balanced":
        return compute_class_weights(class_distribution(records, "image"), scheme="balanced")
    if scheme == "manual":
        try:
            manual = {ClassLabel.from_code(c): float(w) for c, w in config.train.manual_weights.items()}
        except ValueError as e:
            raise ConfigError(f"manual_weights: {e}") from e
        if set(manual) != set(ALL_LABELS):
            raise ConfigError("manual_weights must name all 7 classes")
        return compute_class_weights(class_distribution(records, "image"), scheme="manual", manual=manual)
    raise ConfigError(f"unknown weight_scheme {scheme!r}; expected balanced, manual or none")


def dump_config(config: ExperimentConfig, path: Path) -> None:
    path.write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))
