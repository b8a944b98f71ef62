"""Classification losses for imbalanced 7-way prediction.

Three related losses share one core formula: with p_t the predicted
probability of the true class (clamped away from 0 and 1),

    loss = -alpha_t * (1 - p_t)**gamma * log(p_t)

gamma > 0 damps well-classified samples so training concentrates on hard
ones; alpha_t carries the per-class weight. gamma = 0 with alpha_t = w_t is
weighted cross-entropy; gamma = 0, alpha_t = 1 is plain cross-entropy.

The numpy functions here are float64 and serve as the reference definition
(validated against arbitrary-precision evaluation in the test suite); the
torch criterion mirrors them for batched training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .catalog import ClassWeights
from .labels import ALL_LABELS, NUM_CLASSES, ClassLabel

PROB_EPS = 1e-7
_SUM_TOL = 1e-5


@dataclass(frozen=True)
class FocalParams:
    """Focusing exponent gamma plus per-class (or scalar) alpha weights."""

    gamma: float = 2.0
    alpha: float | dict[ClassLabel, float] = 1.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        vec = self.alpha_vector()
        if np.any(vec <= 0):
            raise ValueError("all alpha entries must be positive")

    def alpha_vector(self) -> np.ndarray:
        if isinstance(self.alpha, dict):
            missing = [c.code for c in ALL_LABELS if c not in self.alpha]
            if missing:
                raise ValueError(f"alpha map is missing classes {missing}")
            return np.array([float(self.alpha[c]) for c in ALL_LABELS], dtype=np.float64)
        return np.full(NUM_CLASSES, float(self.alpha), dtype=np.float64)


def _as_prob_matrix(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 1:
        p = p[None, :]
    if p.ndim != 2 or p.shape[1] != NUM_CLASSES:
        raise ValueError(f"expected probability vectors of length {NUM_CLASSES}, got shape {np.shape(probs)}")
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > _SUM_TOL):
        raise ValueError(f"probability vectors must sum to 1 within {_SUM_TOL}")
    return p


def _as_target_indices(target, n: int) -> np.ndarray:
    if isinstance(target, ClassLabel):
        idx = np.full(n, target.index, dtype=np.int64)
    else:
        idx = np.atleast_1d(np.asarray(target))
        if idx.dtype == object:
            idx = np.array([t.index if isinstance(t, ClassLabel) else int(t) for t in idx], dtype=np.int64)
        idx = idx.astype(np.int64)
    if idx.shape != (n,):
        raise ValueError(f"expected {n} targets, got shape {idx.shape}")
    if np.any(idx < 0) or np.any(idx >= NUM_CLASSES):
        raise ValueError(f"target index out of range [0, {NUM_CLASSES})")
    return idx


def _clamped_pt(probs, target) -> tuple[np.ndarray, np.ndarray]:
    p = _as_prob_matrix(probs)
    idx = _as_target_indices(target, p.shape[0])
    pt = np.clip(p[np.arange(p.shape[0]), idx], PROB_EPS, 1.0 - PROB_EPS)
    return pt, idx


def focal_loss(probs, target, params: FocalParams) -> float:
    """Mean focal loss over one or more samples."""
    pt, idx = _clamped_pt(probs, target)
    alpha_t = params.alpha_vector()[idx]
    return float(np.mean(-alpha_t * (1.0 - pt) ** params.gamma * np.log(pt)))


def weighted_cross_entropy(probs, target, weights: ClassWeights) -> float:
    """Mean of -w_t * log(p_t)."""
    return focal_loss(probs, target, FocalParams(gamma=0.0, alpha=weights.weights))


def class_weighted_focal_loss(probs, target, weights: ClassWeights, gamma: float = 2.0) -> float:
    """Focal loss with alpha_t taken from the class-weight vector; reduces to
    weighted_cross_entropy at gamma = 0."""
    return focal_loss(probs, target, FocalParams(gamma=gamma, alpha=weights.weights))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss_gradient(logits, target, params: FocalParams) -> np.ndarray:
    """Gradient of the focal loss with respect to the logits.

    Uses the closed form: with p = softmax(z) and t the target,
    dL/dz_j = dL/dp_t * p_t * (1[j=t] - p_j), where
    dL/dp_t = -alpha_t * ((1-p_t)**g / p_t - g*(1-p_t)**(g-1) * log(p_t)).
    Inside the clamp region the loss is constant in p_t, so the gradient
    is exactly zero there.
    """
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    squeeze = z.ndim == 1
    if squeeze:
        z = z[None, :]
    if z.shape[1] != NUM_CLASSES:
        raise ValueError(f"expected logits of length {NUM_CLASSES}, got shape {z.shape}")
    idx = _as_target_indices(target, z.shape[0])
    p = softmax(z)
    pt_raw = p[np.arange(p.shape[0]), idx]
    pt = np.clip(pt_raw, PROB_EPS, 1.0 - PROB_EPS)
    alpha_t = params.alpha_vector()[idx]
    g = params.gamma

    # d(loss)/d(p_t); zero where the clamp is active.
    if g == 0.0:
        dl_dpt = -alpha_t / pt
    else:
        dl_dpt = -alpha_t * ((1.0 - pt) ** g / pt - g * (1.0 - pt) ** (g - 1.0) * np.log(pt))
    active = (pt_raw > PROB_EPS) & (pt_raw < 1.0 - PROB_EPS)
    dl_dpt = np.where(active, dl_dpt, 0.0)

    onehot = np.zeros_like(p)
    onehot[np.arange(p.shape[0]), idx] = 1.0
    grad = dl_dpt[:, None] * pt_raw[:, None] * (onehot - p)
    return grad[0] if squeeze else grad


class FocalLossCriterion(torch.nn.Module):
    """Batched torch version of the same formula, computed from logits.

    ``weights`` is the 7-long alpha vector in class-index order; None means
    all ones. Reduction is the arithmetic mean over the batch.
    """

    def __init__(self, gamma: float = 2.0, weights: ClassWeights | None = None):
        super().__init__()
        if gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {gamma}")
        self.gamma = float(gamma)
        vec = weights.as_vector() if weights is not None else [1.0] * NUM_CLASSES
        self.register_buffer("alpha", torch.tensor(vec, dtype=torch.float32))

    def forward(self, logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
        log_p = torch.log_softmax(logits, dim=1)
        log_pt = log_p.gather(1, targets.view(-1, 1)).squeeze(1)
        log_pt = torch.clamp(log_pt, min=float(np.log(PROB_EPS)), max=float(np.log1p(-PROB_EPS)))
        pt = torch.exp(log_pt)
        alpha_t = self.alpha[targets]
        return (-alpha_t * (1.0 - pt) ** self.gamma * log_pt).mean()


def make_criterion(loss: str, gamma: float, weights: ClassWeights | None) -> FocalLossCriterion:
    """Trainer-facing factory: 'focal', 'weighted_ce', or 'ce'."""
    if loss == "focal":
        return FocalLossCriterion(gamma=gamma, weights=weights)
    if loss == "weighted_ce":
        return FocalLossCriterion(gamma=0.0, weights=weights)
    if loss == "ce":
        return FocalLossCriterion(gamma=0.0, weights=None)
    raise ValueError(f"unknown loss {loss!r}; expected focal, weighted_ce or ce")
