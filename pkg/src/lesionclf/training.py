"""Training loop with Adam, reduce-on-plateau learning rate, best-epoch
checkpointing, the six-experiment method-toggle ablation harness, and k-fold
cross-validation training.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import NO_AUGMENT_SPEC, TRAIN_SPEC, TransformSpec, augment_train, preprocess_eval
from .catalog import (
    ClassWeights,
    LesionRecord,
    SplitManifest,
    eval_ids,
    fold_train_ids,
    fold_val_ids,
)
from .errors import ConfigError, TrainingError
from .images import ImageStore
from .labels import ALL_LABELS
from .losses import make_criterion
from .metrics import MetricsReport, evaluate_predictions
from .models import LesionClassifier, ModelSpec, build_model, load_checkpoint, save_checkpoint
from .seeding import derive_seed

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 50
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    min_lr: float = 1e-7
    loss: str = "focal"  # focal | weighted_ce | ce
    gamma: float = 2.0
    class_weights: ClassWeights | None = None
    use_dropout: bool = True
    use_augment: bool = True
    use_gap: bool = True
    seed: int = 0
    monitor: str = "val_accuracy"  # val_accuracy | val_loss

    def __post_init__(self):
        if not (self.initial_lr > self.min_lr > 0):
            raise ConfigError(
                f"need initial_lr > min_lr > 0, got initial_lr={self.initial_lr}, min_lr={self.min_lr}"
            )
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError(f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if self.loss not in ("focal", "weighted_ce", "ce"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.monitor not in ("val_accuracy", "val_loss"):
            raise ConfigError(f"monitor must be val_accuracy or val_loss, got {self.monitor!r}")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    learning_rate: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_accuracy: float = 0.0

    def to_json(self) -> str:
        return json.dumps(
            {
                "epochs": [dataclasses.asdict(e) for e in self.epochs],
                "best_epoch": self.best_epoch,
                "best_val_accuracy": self.best_val_accuracy,
            },
            indent=2,
        ) + "\n"

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,val_acc,lr"]
        for e in self.epochs:
            lines.append(
                f"{e.epoch},{e.train_loss:.8f},{e.val_loss:.8f},{e.val_accuracy:.8f},{e.learning_rate:.3e}"
            )
        return "\n".join(lines) + "\n"

    def save(self, out_dir: Path) -> None:
        (out_dir / "history.json").write_text(self.to_json())
        (out_dir / "history.csv").write_text(self.to_csv())


class PlateauSchedule:
    """Multiply the learning rate by ``factor`` once the monitored value has
    gone ``patience`` consecutive epochs without improving; never below
    ``min_lr``. Call step() after each epoch; it returns the rate for the
    next one."""

    def __init__(self, initial_lr: float, factor: float, patience: int, min_lr: float):
        self.lr = initial_lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = math.inf
        self.stale = 0

    def step(self, value: float) -> float:
        if value < self.best:
            self.best = value
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.stale = 0
        return self.lr


def _eval_logits(
    model: LesionClassifier, store: ImageStore, ids: list[str], batch_size: int = 64
) -> tuple[torch.Tensor, torch.Tensor]:
    model.eval()
    outs = []
    truths = torch.tensor([store.label_index(i) for i in ids], dtype=torch.int64)
    with torch.no_grad():
        for start in range(0, len(ids), batch_size):
            chunk = ids[start : start + batch_size]
            x = np.stack([preprocess_eval(store.load(i)) for i in chunk])
            outs.append(model.logits(torch.from_numpy(x.transpose(0, 3, 1, 2))))
    return torch.cat(outs, dim=0), truths


def predict_dataset(
    model: LesionClassifier, store: ImageStore, ids: list[str], batch_size: int = 64
) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode probabilities and true label indices for a list of images."""
    logits, truths = _eval_logits(model, store, ids, batch_size)
    return torch.softmax(logits, dim=1).numpy(), truths.numpy()


def fit(
    model: LesionClassifier,
    config: TrainConfig,
    records: list[LesionRecord],
    train_ids: list[str],
    val_ids: list[str],
    out_dir: Path | str,
    augment_spec: TransformSpec = TRAIN_SPEC,
) -> tuple[Path, TrainHistory]:
    """Core loop: train on ``train_ids``, validate on ``val_ids``, keep the
    checkpoint of the best monitored epoch under ``out_dir``."""
    if not train_ids:
        raise ConfigError("empty training set")
    if not val_ids:
        raise ConfigError("empty validation set")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    store = ImageStore(records)
    spec = augment_spec if config.use_augment else NO_AUGMENT_SPEC

    torch.manual_seed(derive_seed(config.seed, "torch"))
    criterion = make_criterion(config.loss, config.gamma, config.class_weights)
    optimizer = torch.optim.Adam(
        (p for p in model.parameters() if p.requires_grad),
        lr=config.initial_lr, betas=(0.9, 0.999), eps=1e-8,
    )
    schedule = PlateauSchedule(
        config.initial_lr, config.plateau_factor, config.plateau_patience, config.min_lr
    )

    history = TrainHistory()
    ckpt_path = out_dir / "best.pt"
    best_score = -math.inf
    lr = config.initial_lr
    train_ids = sorted(train_ids)

    for epoch in range(1, config.max_epochs + 1):
        model.train()
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = np.random.default_rng(derive_seed(config.seed, "order", epoch)).permutation(len(train_ids))
        losses = []
        for bidx, start in enumerate(range(0, len(order), config.batch_size)):
            batch_ids = [train_ids[j] for j in order[start : start + config.batch_size]]
            imgs = []
            for image_id in batch_ids:
                raw = store.load(image_id)
                if config.use_augment:
                    imgs.append(augment_train(raw, spec, derive_seed(config.seed, "aug", epoch, image_id)))
                else:
                    imgs.append(preprocess_eval(raw))
            x = torch.from_numpy(np.stack(imgs).transpose(0, 3, 1, 2))
            y = torch.tensor([store.label_index(i) for i in batch_ids], dtype=torch.int64)
            optimizer.zero_grad()
            loss = criterion(model.logits(x), y)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite training loss at epoch {epoch}, batch {bidx} (lr={lr:.3e})"
                )
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))

        val_logits, val_truths = _eval_logits(model, store, val_ids, config.batch_size)
        with torch.no_grad():
            val_loss = float(criterion(val_logits, val_truths))
        val_acc = float((val_logits.argmax(dim=1) == val_truths).float().mean())

        history.epochs.append(EpochRecord(epoch, float(np.mean(losses)), val_loss, val_acc, lr))
        logger.info(
            "epoch %d: train_loss=%.4f val_loss=%.4f val_acc=%.4f lr=%.2e",
            epoch, history.epochs[-1].train_loss, val_loss, val_acc, lr,
        )

        score = val_acc if config.monitor == "val_accuracy" else -val_loss
        if score > best_score:
            best_score = score
            history.best_epoch = epoch
            save_checkpoint(model, ckpt_path)
        lr = schedule.step(val_loss)

    history.best_val_accuracy = max(e.val_accuracy for e in history.epochs)
    history.save(out_dir)
    return ckpt_path, history


def train(
    model: LesionClassifier,
    manifest: SplitManifest,
    config: TrainConfig,
    records: list[LesionRecord],
    out_dir: Path | str,
    augment_spec: TransformSpec = TRAIN_SPEC,
) -> tuple[Path, TrainHistory]:
    """Manifest-driven training: every image of the train pool (duplicates
    included) against the canonical val images."""
    train_ids = sorted(manifest.train_ids)
    val_ids = eval_ids(manifest, records, "val")
    return fit(model, config, records, train_ids, val_ids, out_dir, augment_spec)


ABLATION_LAYOUT = (
    (1, "no_dropout", "dropout"),
    (2, "no_augment", "augment"),
    (3, "no_class_weights", "class_weights"),
    (4, "no_focal", "focal"),
    (5, "no_gap", "gap"),
    (6, "full", None),
)
TECHNIQUES = ("dropout", "augment", "class_weights", "focal", "gap")


@dataclass
class AblationRow:
    number: int
    name: str
    toggles: dict[str, bool]
    report: MetricsReport

    def summary(self) -> dict[str, float]:
        return {
            "accuracy": self.report.accuracy,
            "precision": self.report.macro_precision,
            "recall": self.report.macro_recall,
            "f1": self.report.macro_f1,
        }


@dataclass
class AblationReport:
    rows: list[AblationRow]

    def to_dict(self) -> dict:
        return {
            "experiments": [
                {
                    "number": r.number,
                    "name": r.name,
                    "toggles": r.toggles,
                    "summary": r.summary(),
                    "report": r.report.to_dict(),
                }
                for r in self.rows
            ]
        }

    def to_markdown(self) -> str:
        lines = ["| Experiment | " + " | ".join(TECHNIQUES) + " | Accuracy | Precision | Recall | F1 |"]
        lines.append("|" + "---|" * (len(TECHNIQUES) + 5))
        for r in self.rows:
            marks = " | ".join("yes" if r.toggles[t] else "no" for t in TECHNIQUES)
            s = r.summary()
            lines.append(
                f"| {r.number} ({r.name}) | {marks} | {s['accuracy']:.3f} | "
                f"{s['precision']:.3f} | {s['recall']:.3f} | {s['f1']:.3f} |"
            )
        for metric in ("precision", "recall", "f1"):
            lines.append("")
            lines.append(f"### Per-class {metric}")
            header = "| Exp | " + " | ".join(c.code for c in ALL_LABELS) + " | Average |"
            lines.append(header)
            lines.append("|" + "---|" * (len(ALL_LABELS) + 2))
            for r in self.rows:
                vals = [getattr(r.report.per_class[c], metric) for c in ALL_LABELS]
                avg = getattr(r.report, f"macro_{metric}")
                lines.append(
                    f"| {r.number} | " + " | ".join(f"{v:.2f}" for v in vals) + f" | {avg:.2f} |"
                )
        return "\n".join(lines) + "\n"


def _ablation_variant(
    name: str, base_config: TrainConfig, base_spec: ModelSpec
) -> tuple[TrainConfig, ModelSpec, dict[str, bool]]:
    toggles = {t: True for t in TECHNIQUES}
    config, spec = base_config, base_spec
    if name == "no_dropout":
        spec = dataclasses.replace(spec, dropout_rate=0.0)
        config = dataclasses.replace(config, use_dropout=False)
        toggles["dropout"] = False
    elif name == "no_augment":
        config = dataclasses.replace(config, use_augment=False)
        toggles["augment"] = False
    elif name == "no_class_weights":
        config = dataclasses.replace(config, class_weights=None)
        toggles["class_weights"] = False
    elif name == "no_focal":
        config = dataclasses.replace(config, loss="weighted_ce")
        toggles["focal"] = False
    elif name == "no_gap":
        spec = dataclasses.replace(spec, use_gap=False)
        config = dataclasses.replace(config, use_gap=False)
        toggles["gap"] = False
    return config, spec, toggles


def run_ablation(
    base_config: TrainConfig,
    manifest: SplitManifest,
    records: list[LesionRecord],
    base_spec: ModelSpec,
    out_dir: Path | str,
    augment_spec: TransformSpec = TRAIN_SPEC,
) -> AblationReport:
    """Six experiments: five disable exactly one technique each, the sixth
    runs everything; each is scored on the common test set."""
    if base_config.loss != "focal" or base_config.class_weights is None:
        raise ConfigError("ablation baseline must use focal loss with class weights")
    if not (base_config.use_dropout and base_config.use_augment and base_config.use_gap):
        raise ConfigError("ablation baseline must enable dropout, augmentation and GAP")
    if not base_spec.use_gap or base_spec.dropout_rate <= 0:
        raise ConfigError("ablation baseline model must use GAP and a positive dropout rate")

    out_dir = Path(out_dir)
    store = ImageStore(records)
    test_ids = eval_ids(manifest, records, "test")
    rows = []
    for number, name, _ in ABLATION_LAYOUT:
        config, spec, toggles = _ablation_variant(name, base_config, base_spec)
        exp_dir = out_dir / f"exp{number}_{name}"
        logger.info("ablation experiment %d (%s)", number, name)
        torch.manual_seed(derive_seed(config.seed, "ablation-init", number))
        model = build_model(spec)
        ckpt, _ = train(model, manifest, config, records, exp_dir, augment_spec)
        best = load_checkpoint(ckpt, num_classes=spec.num_classes)
        probs, truths = predict_dataset(best, store, test_ids, config.batch_size)
        rows.append(AblationRow(number, name, toggles, evaluate_predictions(probs, truths)))

    report = AblationReport(rows)
    (out_dir / "ablation.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    (out_dir / "ablation.md").write_text(report.to_markdown())
    return report


def train_kfold(
    manifest: SplitManifest,
    config: TrainConfig,
    records: list[LesionRecord],
    model_spec: ModelSpec,
    out_dir: Path | str,
    augment_spec: TransformSpec = TRAIN_SPEC,
) -> tuple[list[Path], list[MetricsReport]]:
    """Train one model per fold (trained on the other folds, validated on its
    own) and score every fold's best checkpoint on the shared test set."""
    if manifest.k < 2 or not manifest.fold_of:
        raise ConfigError("manifest carries no k-fold assignment; rerun prepare with k >= 2")
    out_dir = Path(out_dir)
    store = ImageStore(records)
    test_ids = eval_ids(manifest, records, "test")
    checkpoints: list[Path] = []
    reports: list[MetricsReport] = []
    for fold in range(manifest.k):
        fold_dir = out_dir / f"fold{fold}"
        train_ids = fold_train_ids(manifest, fold)
        val_ids = fold_val_ids(manifest, records, fold)
        logger.info("fold %d: %d train images, %d val images", fold, len(train_ids), len(val_ids))
        torch.manual_seed(derive_seed(config.seed, "fold-init", fold))
        model = build_model(model_spec)
        fold_config = dataclasses.replace(config, seed=derive_seed(config.seed, "fold", fold) % 2**31)
        ckpt, _ = fit(model, fold_config, records, train_ids, val_ids, fold_dir, augment_spec)
        checkpoints.append(ckpt)
        best = load_checkpoint(ckpt, num_classes=model_spec.num_classes)
        probs, truths = predict_dataset(best, store, test_ids, config.batch_size)
        reports.append(evaluate_predictions(probs, truths))
    return checkpoints, reports
