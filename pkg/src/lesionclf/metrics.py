"""Evaluation metrics: confusion matrix, one-vs-rest per-class scores,
top-k accuracy, rank-statistic AUC, and report rendering.

Per class c the one-vs-rest counts are TP = cm[c][c], FP = column sum - TP,
FN = row sum - TP, TN = total - TP - FP - FN, from which

    precision   = TP / (TP + FP)
    recall      = TP / (TP + FN)
    f1          = 2*TP / (2*TP + FP + FN)
    specificity = TN / (FP + TN)

Zero-denominator metrics are reported as 0.0 and flagged by name instead of
NaN so reports stay machine readable; a class absent from both truths and
predictions flags all four. AUC uses the Mann-Whitney rank statistic with
ties counted as half, which equals trapezoidal integration of the ROC curve.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .errors import DataError
from .labels import ALL_LABELS, NUM_CLASSES, ClassLabel

SCHEMA_VERSION = 1


@dataclass
class ConfusionMatrix:
    """7x7 count matrix; rows are true classes, columns predicted classes."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (NUM_CLASSES, NUM_CLASSES):
            raise ValueError(f"confusion matrix must be {NUM_CLASSES}x{NUM_CLASSES}, got {self.counts.shape}")
        if np.any(self.counts < 0):
            raise ValueError("confusion matrix entries must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    specificity: float
    support: int
    undefined: tuple[str, ...] = ()


@dataclass
class MetricsReport:
    per_class: dict[ClassLabel, ClassMetrics]
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    micro_precision: float
    micro_recall: float
    micro_f1: float
    top_k: dict[int, float]
    auc_per_class: dict[ClassLabel, float | None]
    macro_auc: float | None
    confusion: ConfusionMatrix
    roc_curves: dict[str, list[list[float]]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "per_class": {
                c.code: {
                    "precision": m.precision,
                    "recall": m.recall,
                    "f1": m.f1,
                    "specificity": m.specificity,
                    "support": m.support,
                    "undefined": list(m.undefined),
                }
                for c, m in self.per_class.items()
            },
            "accuracy": self.accuracy,
            "macro": {"precision": self.macro_precision, "recall": self.macro_recall, "f1": self.macro_f1},
            "micro": {"precision": self.micro_precision, "recall": self.micro_recall, "f1": self.micro_f1},
            "top_k": {str(k): v for k, v in self.top_k.items()},
            "auc_per_class": {c.code: v for c, v in self.auc_per_class.items()},
            "macro_auc": self.macro_auc,
            "confusion": self.confusion.counts.tolist(),
            "roc_curves": self.roc_curves,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise DataError(f"unsupported metrics schema version {d.get('schema_version')!r}")
        return cls(
            per_class={
                ClassLabel.from_code(code): ClassMetrics(
                    precision=m["precision"],
                    recall=m["recall"],
                    f1=m["f1"],
                    specificity=m["specificity"],
                    support=m["support"],
                    undefined=tuple(m["undefined"]),
                )
                for code, m in d["per_class"].items()
            },
            accuracy=d["accuracy"],
            macro_precision=d["macro"]["precision"],
            macro_recall=d["macro"]["recall"],
            macro_f1=d["macro"]["f1"],
            micro_precision=d["micro"]["precision"],
            micro_recall=d["micro"]["recall"],
            micro_f1=d["micro"]["f1"],
            top_k={int(k): v for k, v in d["top_k"].items()},
            auc_per_class={ClassLabel.from_code(c): v for c, v in d["auc_per_class"].items()},
            macro_auc=d["macro_auc"],
            confusion=ConfusionMatrix(np.array(d["confusion"])),
            roc_curves=d.get("roc_curves", {}),
        )


def _as_indices(labels) -> np.ndarray:
    out = np.array([l.index if isinstance(l, ClassLabel) else int(l) for l in labels], dtype=np.int64)
    if out.size and (out.min() < 0 or out.max() >= NUM_CLASSES):
        raise ValueError(f"class index out of range [0, {NUM_CLASSES})")
    return out


def confusion(preds, truths) -> ConfusionMatrix:
    """Count matrix with counts[true][pred] incremented per sample."""
    p = _as_indices(preds)
    t = _as_indices(truths)
    if len(p) != len(t):
        raise ValueError(f"length mismatch: {len(p)} predictions vs {len(t)} truths")
    if len(p) == 0:
        raise ValueError("cannot build a confusion matrix from zero samples")
    cm = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return ConfusionMatrix(cm)


def _safe_div(num: float, den: float, name: str, undefined: list[str]) -> float:
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def per_class_metrics(cm: ConfusionMatrix) -> dict[ClassLabel, ClassMetrics]:
    """One-vs-rest precision/recall/F1/specificity per class."""
    counts = cm.counts
    total = cm.total
    out: dict[ClassLabel, ClassMetrics] = {}
    for c in ALL_LABELS:
        i = c.index
        tp = int(counts[i, i])
        fp = int(counts[:, i].sum()) - tp
        fn = int(counts[i, :].sum()) - tp
        tn = total - tp - fp - fn
        undefined: list[str] = []
        if tp + fn == 0 and tp + fp == 0:
            # Class absent from truths and predictions: nothing meaningful
            # to score, flag everything.
            undefined = ["precision", "recall", "f1", "specificity"]
            out[c] = ClassMetrics(0.0, 0.0, 0.0, 0.0, 0, tuple(undefined))
            continue
        precision = _safe_div(tp, tp + fp, "precision", undefined)
        recall = _safe_div(tp, tp + fn, "recall", undefined)
        f1 = _safe_div(2 * tp, 2 * tp + fp + fn, "f1", undefined)
        specificity = _safe_div(tn, fp + tn, "specificity", undefined)
        out[c] = ClassMetrics(precision, recall, f1, specificity, tp + fn, tuple(undefined))
    return out


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("accuracy of an empty confusion matrix is undefined")
    return float(np.trace(cm.counts)) / cm.total


def _as_prob_matrix(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != NUM_CLASSES:
        raise ValueError(f"expected an (n, {NUM_CLASSES}) probability matrix, got shape {p.shape}")
    return p


def top_k_accuracy(probs, truths, k: int) -> float:
    """Fraction of samples whose true class ranks within the k highest
    probabilities; ties resolved in favour of the lower class index."""
    if not 1 <= k <= NUM_CLASSES:
        raise ValueError(f"k must lie in [1, {NUM_CLASSES}], got {k}")
    p = _as_prob_matrix(probs)
    t = _as_indices(truths)
    if p.shape[0] != len(t):
        raise ValueError(f"length mismatch: {p.shape[0]} probability rows vs {len(t)} truths")
    if len(t) == 0:
        raise ValueError("top-k accuracy of zero samples is undefined")
    # stable sort on -p keeps lower class indices first among ties
    order = np.argsort(-p, axis=1, kind="stable")
    hits = (order[:, :k] == t[:, None]).any(axis=1)
    return float(hits.mean())


def roc_auc(probs, truths) -> tuple[dict[ClassLabel, float | None], float | None]:
    """One-vs-rest AUC per class via the rank statistic (ties count half),
    plus the macro mean over the classes where AUC is defined."""
    p = _as_prob_matrix(probs)
    t = _as_indices(truths)
    if p.shape[0] != len(t):
        raise ValueError(f"length mismatch: {p.shape[0]} probability rows vs {len(t)} truths")
    per_class: dict[ClassLabel, float | None] = {}
    defined: list[float] = []
    for c in ALL_LABELS:
        pos = t == c.index
        n_pos = int(pos.sum())
        n_neg = len(t) - n_pos
        if n_pos == 0 or n_neg == 0:
            per_class[c] = None
            continue
        ranks = rankdata(p[:, c.index])
        u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
        auc = float(u / (n_pos * n_neg))
        per_class[c] = auc
        defined.append(auc)
    macro = float(np.mean(defined)) if defined else None
    return per_class, macro


def _roc_curve(scores: np.ndarray, positive: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, tpr) points swept over all score thresholds, high to low."""
    order = np.argsort(-scores, kind="stable")
    pos = positive[order].astype(np.float64)
    tp = np.cumsum(pos)
    fp = np.cumsum(1.0 - pos)
    # collapse runs of equal scores to their last point
    s = scores[order]
    keep = np.r_[s[1:] != s[:-1], True]
    tp, fp = tp[keep], fp[keep]
    tpr = np.r_[0.0, tp / tp[-1]] if tp[-1] > 0 else np.r_[0.0, np.zeros_like(tp)]
    fpr = np.r_[0.0, fp / fp[-1]] if fp[-1] > 0 else np.r_[0.0, np.zeros_like(fp)]
    return fpr, tpr


def _roc_curves(p: np.ndarray, t: np.ndarray) -> dict[str, list[list[float]]]:
    curves: dict[str, list[list[float]]] = {}
    grid = np.linspace(0.0, 1.0, 101)
    interp_sum = np.zeros_like(grid)
    n_defined = 0
    for c in ALL_LABELS:
        pos = t == c.index
        if pos.sum() == 0 or pos.sum() == len(t):
            continue
        fpr, tpr = _roc_curve(p[:, c.index], pos)
        curves[c.code] = [fpr.tolist(), tpr.tolist()]
        interp_sum += np.interp(grid, fpr, tpr)
        n_defined += 1
    if n_defined:
        curves["macro"] = [grid.tolist(), (interp_sum / n_defined).tolist()]
    return curves


def evaluate_predictions(probs, truths, ks: tuple[int, ...] = (1, 2, 3)) -> MetricsReport:
    """Full metrics report from probability rows and true labels."""
    p = _as_prob_matrix(probs)
    t = _as_indices(truths)
    preds = np.argmax(p, axis=1)  # first (lowest-index) argmax on ties
    cm = confusion(preds, t)
    per_class = per_class_metrics(cm)
    auc_per_class, macro_auc = roc_auc(p, t)

    macro_p = float(np.mean([m.precision for m in per_class.values()]))
    macro_r = float(np.mean([m.recall for m in per_class.values()]))
    macro_f = float(np.mean([m.f1 for m in per_class.values()]))
    # single-label multiclass: micro precision = micro recall = accuracy
    acc = accuracy(cm)

    return MetricsReport(
        per_class=per_class,
        accuracy=acc,
        macro_precision=macro_p,
        macro_recall=macro_r,
        macro_f1=macro_f,
        micro_precision=acc,
        micro_recall=acc,
        micro_f1=acc,
        top_k={k: top_k_accuracy(p, t, k) for k in ks},
        auc_per_class=auc_per_class,
        macro_auc=macro_auc,
        confusion=cm,
        roc_curves=_roc_curves(p, t),
    )


def confusion_figure(cm: ConfusionMatrix):
    """Annotated heatmap of the confusion matrix."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 6))
    im = ax.imshow(cm.counts, cmap="Blues")
    codes = [c.code for c in ALL_LABELS]
    ax.set_xticks(range(NUM_CLASSES), codes)
    ax.set_yticks(range(NUM_CLASSES), codes)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    thresh = cm.counts.max() / 2 if cm.total else 0
    for i in range(NUM_CLASSES):
        for j in range(NUM_CLASSES):
            ax.text(
                j, i, str(cm.counts[i, j]),
                ha="center", va="center",
                color="white" if cm.counts[i, j] > thresh else "black",
            )
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    return fig


def roc_figure(roc_curves: dict[str, list[list[float]]]):
    """One-vs-rest ROC curves, one line per class plus the macro mean."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 6))
    for name, (fpr, tpr) in roc_curves.items():
        style = {"linewidth": 2.5, "color": "black", "linestyle": "--"} if name == "macro" else {}
        ax.plot(fpr, tpr, label=name, **style)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower right")
    fig.tight_layout()
    return fig


def render_report(report: MetricsReport, out_dir: Path | str) -> dict[str, Path]:
    """Write metrics.json, confusion.png, roc.png and per_class.csv."""
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "metrics": out_dir / "metrics.json",
            "confusion": out_dir / "confusion.png",
            "roc": out_dir / "roc.png",
            "per_class": out_dir / "per_class.csv",
        }
        paths["metrics"].write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")

        fig = confusion_figure(report.confusion)
        fig.savefig(paths["confusion"], dpi=110)
        plt.close(fig)
        fig = roc_figure(report.roc_curves)
        fig.savefig(paths["roc"], dpi=110)
        plt.close(fig)

        with open(paths["per_class"], "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "precision", "recall", "f1", "specificity", "support", "auc"])
            for c in ALL_LABELS:
                m = report.per_class[c]
                auc = report.auc_per_class.get(c)
                writer.writerow([
                    c.code, f"{m.precision:.6f}", f"{m.recall:.6f}", f"{m.f1:.6f}",
                    f"{m.specificity:.6f}", m.support, "" if auc is None else f"{auc:.6f}",
                ])
    except OSError as e:
        raise DataError(f"failed writing report under {out_dir}: {e}") from e
    return paths


def load_report(path: Path | str) -> MetricsReport:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"metrics file not found: {path}")
    return MetricsReport.from_dict(json.loads(path.read_text()))
