"""Fold-model ensembling by probability averaging, with optional test-time
augmentation: predictions are the flat mean over every (model, view) pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import TTA_SPEC, TransformSpec, tta_variants
from .catalog import LesionRecord, SplitManifest, eval_ids
from .errors import CheckpointError, ConfigError
from .images import ImageStore
from .labels import NUM_CLASSES
from .metrics import MetricsReport, evaluate_predictions
from .models import LesionClassifier, load_checkpoint
from .seeding import derive_seed

_SUM_TOL = 1e-5


@dataclass(frozen=True)
class EnsembleSpec:
    checkpoint_paths: tuple[Path, ...]
    tta_n: int = 1
    tta_seed: int = 0
    tta_spec: TransformSpec = field(default=TTA_SPEC)

    def __post_init__(self):
        if len(self.checkpoint_paths) < 1:
            raise ConfigError("an ensemble needs at least one checkpoint")
        if self.tta_n < 1:
            raise ConfigError(f"tta_n must be >= 1, got {self.tta_n}")


def _pairwise_sum(vectors: list[np.ndarray]) -> np.ndarray:
    if len(vectors) == 1:
        return vectors[0]
    mid = len(vectors) // 2
    return _pairwise_sum(vectors[:mid]) + _pairwise_sum(vectors[mid:])


def average_probabilities(vectors) -> np.ndarray:
    """Elementwise mean of probability vectors, summed pairwise so the result
    is stable (to ~1e-16) under input reordering."""
    vs = [np.asarray(v, dtype=np.float64) for v in vectors]
    if not vs:
        raise ValueError("cannot average an empty list of probability vectors")
    for v in vs:
        if v.shape != (NUM_CLASSES,):
            raise ValueError(f"expected vectors of shape ({NUM_CLASSES},), got {v.shape}")
        if v.min() < 0 or v.max() > 1 or abs(v.sum() - 1.0) > _SUM_TOL:
            raise ValueError("inputs must be probability vectors on the simplex")
    return _pairwise_sum(vs) / len(vs)


class Ensemble:
    """Loaded ensemble members plus the TTA policy from an EnsembleSpec."""

    def __init__(self, spec: EnsembleSpec):
        self.spec = spec
        self.models: list[LesionClassifier] = [
            load_checkpoint(p) for p in spec.checkpoint_paths
        ]
        classes = {m.spec.num_classes for m in self.models}
        if len(classes) != 1:
            raise CheckpointError(
                f"ensemble members disagree on num_classes: {sorted(classes)}"
            )
        self.num_classes = classes.pop()

    def member_probabilities(self, image, image_key=None) -> np.ndarray:
        """(n_models, tta_n, num_classes) probabilities for one raw image.

        Views are derived deterministically from (tta_seed, image_key); view 0
        is always the plain eval view.
        """
        seed = derive_seed(self.spec.tta_seed, image_key if image_key is not None else "image")
        views = tta_variants(image, self.spec.tta_n, seed, self.spec.tta_spec)
        x = torch.from_numpy(np.stack(views).transpose(0, 3, 1, 2))
        out = np.empty((len(self.models), self.spec.tta_n, self.num_classes), dtype=np.float64)
        with torch.no_grad():
            for mi, model in enumerate(self.models):
                model.eval()
                out[mi] = model(x).numpy()
        return out

    def predict(self, image, image_key=None) -> np.ndarray:
        """Flat mean over all (model, view) outputs."""
        outs = self.member_probabilities(image, image_key)
        return average_probabilities(list(outs.reshape(-1, self.num_classes)))

    def predict_plain(self, image, image_key=None) -> np.ndarray:
        """Mean over models of the un-augmented view only."""
        outs = self.member_probabilities(image, image_key)
        return average_probabilities(list(outs[:, 0, :]))


def predict(spec: EnsembleSpec, image) -> np.ndarray:
    """One-shot ensemble prediction for a single image."""
    return Ensemble(spec).predict(image)


def evaluate_ensemble(
    spec: EnsembleSpec,
    manifest: SplitManifest,
    records: list[LesionRecord],
) -> dict[str, MetricsReport]:
    """Score the ensemble on the canonical test images.

    Returns {'ensemble': ...} and additionally {'tta': ...} when tta_n > 1;
    the plain report always averages only the un-augmented view.
    """
    test_ids = eval_ids(manifest, records, "test")
    if not test_ids:
        raise ConfigError("manifest has an empty test split")
    store = ImageStore(records)
    ensemble = Ensemble(spec)

    plain_rows = np.empty((len(test_ids), ensemble.num_classes))
    tta_rows = np.empty_like(plain_rows)
    truths = np.empty(len(test_ids), dtype=np.int64)
    for i, image_id in enumerate(test_ids):
        outs = ensemble.member_probabilities(store.load(image_id), image_key=image_id)
        plain_rows[i] = average_probabilities(list(outs[:, 0, :]))
        tta_rows[i] = average_probabilities(list(outs.reshape(-1, ensemble.num_classes)))
        truths[i] = store.label_index(image_id)

    reports = {"ensemble": evaluate_predictions(plain_rows, truths)}
    if spec.tta_n > 1:
        reports["tta"] = evaluate_predictions(tta_rows, truths)
    return reports
