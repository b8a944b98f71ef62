"""Imbalance-aware skin lesion classification pipeline: leakage-safe
stratified splits, class-weighted focal loss training, k-fold ensembling
with test-time augmentation, a full metrics suite, and GradCAM heatmaps."""

__version__ = "0.1.0"

from .labels import ALL_LABELS, NUM_CLASSES, ClassLabel

__all__ = ["ALL_LABELS", "NUM_CLASSES", "ClassLabel", "__version__"]
