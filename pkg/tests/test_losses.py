import math

import mpmath as mp
import numpy as np
import pytest
import torch

from lesionclf.catalog import ClassWeights
from lesionclf.labels import ALL_LABELS, NUM_CLASSES, ClassLabel
from lesionclf.losses import (
    PROB_EPS,
    FocalParams,
    FocalLossCriterion,
    class_weighted_focal_loss,
    focal_loss,
    loss_gradient,
    make_criterion,
    softmax,
    weighted_cross_entropy,
)

mp.mp.dps = 50


def oracle_focal(p_t: float, gamma: float, alpha: float) -> float:
    """Arbitrary-precision evaluation of -alpha * (1-p)^gamma * log(p)."""
    p = min(max(mp.mpf(repr(p_t)), mp.mpf(repr(PROB_EPS))), 1 - mp.mpf(repr(PROB_EPS)))
    return float(-mp.mpf(repr(alpha)) * (1 - p) ** mp.mpf(repr(gamma)) * mp.log(p))


def vector_with_pt(p_t: float, target: int, rng=None) -> np.ndarray:
    """Probability vector whose target entry is p_t."""
    v = np.full(NUM_CLASSES, (1.0 - p_t) / (NUM_CLASSES - 1))
    v[target] = p_t
    return v


def unit_weights(value=1.0) -> ClassWeights:
    return ClassWeights({c: value for c in ALL_LABELS})


class TestFocalLoss:
    def test_perfect_prediction_vanishes(self):
        v = np.zeros(NUM_CLASSES)
        v[3] = 1.0
        assert focal_loss(v, 3, FocalParams(gamma=2.0, alpha=0.5)) < 1e-6

    def test_gamma_zero_reduces_to_cross_entropy(self):
        v = vector_with_pt(0.5, 0)
        assert focal_loss(v, 0, FocalParams(gamma=0.0, alpha=1.0)) == pytest.approx(
            0.6931472, abs=1e-7
        )

    def test_hand_value_gamma2(self):
        v = vector_with_pt(0.9, 2)
        got = focal_loss(v, 2, FocalParams(gamma=2.0, alpha=0.25))
        assert got == pytest.approx(2.6341e-4, rel=1e-4)
        assert got == pytest.approx(oracle_focal(0.9, 2.0, 0.25), rel=1e-12)

    def test_batch_is_mean_of_samples(self):
        v1, v2 = vector_with_pt(0.5, 0), vector_with_pt(0.8, 1)
        params = FocalParams(gamma=2.0, alpha=1.0)
        batched = focal_loss(np.stack([v1, v2]), [0, 1], params)
        assert batched == pytest.approx(
            (focal_loss(v1, 0, params) + focal_loss(v2, 1, params)) / 2, rel=1e-12
        )

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            focal_loss(vector_with_pt(0.5, 0), 9, FocalParams())
        with pytest.raises(ValueError):
            focal_loss(np.full(NUM_CLASSES, 0.5), 0, FocalParams())  # sums to 3.5
        with pytest.raises(ValueError):
            focal_loss(np.ones(4), 0, FocalParams())
        with pytest.raises(ValueError):
            FocalParams(gamma=-1.0)
        with pytest.raises(ValueError):
            FocalParams(alpha=0.0)


class TestWeightedCrossEntropy:
    def test_unit_weights_match_plain_ce(self):
        v = vector_with_pt(0.5, 4)
        assert weighted_cross_entropy(v, 4, unit_weights()) == pytest.approx(0.6931472, abs=1e-7)

    def test_weight_scales_linearly(self):
        v = vector_with_pt(0.5, 4)
        w = unit_weights()
        w.weights[ClassLabel.MEL] = 2.5
        assert weighted_cross_entropy(v, ClassLabel.MEL, w) == pytest.approx(1.7328680, abs=1e-6)

    def test_certain_prediction(self):
        v = np.zeros(NUM_CLASSES)
        v[0] = 1.0
        assert weighted_cross_entropy(v, 0, unit_weights(3.0)) < 1e-6


class TestClassWeightedFocal:
    def test_gamma_zero_equals_weighted_ce_exactly(self):
        rng = np.random.default_rng(0)
        w = ClassWeights({c: float(rng.uniform(0.2, 5)) for c in ALL_LABELS})
        for _ in range(50):
            v = rng.dirichlet(np.ones(NUM_CLASSES))
            t = int(rng.integers(0, NUM_CLASSES))
            assert class_weighted_focal_loss(v, t, w, gamma=0.0) == pytest.approx(
                weighted_cross_entropy(v, t, w), abs=1e-12
            )

    def test_hand_value(self):
        w = unit_weights()
        w.weights[ALL_LABELS[2]] = 2.5
        v = vector_with_pt(0.9, 2)
        assert class_weighted_focal_loss(v, 2, w, gamma=2.0) == pytest.approx(2.6340e-3, rel=1e-4)

    def test_vanishes_near_certainty(self):
        v = vector_with_pt(0.999999, 5)
        assert class_weighted_focal_loss(v, 5, unit_weights(), gamma=2.0) <= 1e-5


class TestLossProperties:
    def test_non_negative_and_monotone_in_pt(self):
        params = FocalParams(gamma=2.0, alpha=0.7)
        pts = np.linspace(0.01, 0.99, 40)
        vals = [focal_loss(vector_with_pt(p, 0), 0, params) for p in pts]
        assert all(v >= 0 for v in vals)
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_damping_bound(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            p_t = float(rng.uniform(0.01, 0.99))
            gamma = float(rng.uniform(0, 5))
            alpha = float(rng.uniform(0.1, 3))
            fl = focal_loss(vector_with_pt(p_t, 0), 0, FocalParams(gamma=gamma, alpha=alpha))
            assert fl <= alpha * (-math.log(p_t)) + 1e-12

    def test_hard_example_emphasis(self):
        for gamma in (0.5, 1.0, 2.0, 5.0):
            hard = focal_loss(vector_with_pt(0.1, 0), 0, FocalParams(gamma=gamma, alpha=1.0))
            easy = focal_loss(vector_with_pt(0.9, 0), 0, FocalParams(gamma=gamma, alpha=1.0))
            hard0 = focal_loss(vector_with_pt(0.1, 0), 0, FocalParams(gamma=0.0, alpha=1.0))
            easy0 = focal_loss(vector_with_pt(0.9, 0), 0, FocalParams(gamma=0.0, alpha=1.0))
            assert hard / easy > hard0 / easy0


def finite_difference(logits, target, params, h=1e-4):
    grad = np.zeros_like(logits)
    for j in range(len(logits)):
        up, down = logits.copy(), logits.copy()
        up[j] += h
        down[j] -= h
        grad[j] = (
            focal_loss(softmax(up), target, params) - focal_loss(softmax(down), target, params)
        ) / (2 * h)
    return grad


class TestLossGradient:
    def test_uniform_logits_gamma0_matches_softmax_ce(self):
        logits = np.zeros(NUM_CLASSES)
        grad = loss_gradient(logits, 2, FocalParams(gamma=0.0, alpha=1.0))
        p = softmax(logits)
        onehot = np.zeros(NUM_CLASSES)
        onehot[2] = 1.0
        np.testing.assert_allclose(grad, p - onehot, atol=1e-12)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            logits = rng.normal(0, 2, NUM_CLASSES)
            target = int(rng.integers(0, NUM_CLASSES))
            gamma = float(rng.choice([0.0, 1.0, 2.0, 5.0]))
            alpha = float(rng.uniform(0.2, 3.0))
            params = FocalParams(gamma=gamma, alpha=alpha)
            got = loss_gradient(logits, target, params)
            want = finite_difference(logits, target, params)
            np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-8)

    def test_gradient_vanishes_at_confident_correct(self):
        logits = np.zeros(NUM_CLASSES)
        logits[3] = 30.0
        grad = loss_gradient(logits, 3, FocalParams(gamma=2.0, alpha=1.0))
        assert np.linalg.norm(grad) < 1e-8

    def test_non_finite_logits_rejected(self):
        bad = np.zeros(NUM_CLASSES)
        bad[0] = np.nan
        with pytest.raises(ValueError):
            loss_gradient(bad, 0, FocalParams())


class TestTorchCriterion:
    def test_matches_numpy_reference(self):
        rng = np.random.default_rng(3)
        w = ClassWeights({c: float(rng.uniform(0.3, 4)) for c in ALL_LABELS})
        crit = FocalLossCriterion(gamma=2.0, weights=w)
        logits = rng.normal(0, 2, size=(16, NUM_CLASSES))
        targets = rng.integers(0, NUM_CLASSES, size=16)
        got = float(crit(torch.tensor(logits, dtype=torch.float32), torch.tensor(targets)))
        want = class_weighted_focal_loss(softmax(logits), targets, w, gamma=2.0)
        assert got == pytest.approx(want, rel=1e-4)

    def test_make_criterion_variants(self):
        w = ClassWeights({c: 2.0 for c in ALL_LABELS})
        logits = torch.randn(4, NUM_CLASSES)
        targets = torch.tensor([0, 1, 2, 3])
        focal = make_criterion("focal", 2.0, w)
        wce = make_criterion("weighted_ce", 2.0, w)
        ce = make_criterion("ce", 2.0, w)
        assert wce.gamma == 0.0
        assert float(wce(logits, targets)) == pytest.approx(2 * float(ce(logits, targets)), rel=1e-6)
        assert float(focal(logits, targets)) <= float(wce(logits, targets))
        with pytest.raises(ValueError):
            make_criterion("hinge", 0.0, None)
