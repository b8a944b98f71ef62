import dataclasses

import numpy as np
import pytest
import torch

from lesionclf.catalog import eval_ids, load_catalog, make_split
from lesionclf.ensembling import (
    Ensemble,
    EnsembleSpec,
    average_probabilities,
    evaluate_ensemble,
    predict,
)
from lesionclf.errors import CheckpointError, ConfigError
from lesionclf.images import ImageStore
from lesionclf.labels import NUM_CLASSES
from lesionclf.models import ModelSpec, build_model, predict_probabilities, save_checkpoint

TINY = ModelSpec(backbone="tiny_test", pretrained=False)


def random_simplex(rng, n):
    return rng.dirichlet(np.ones(NUM_CLASSES), size=n)


class TestAverageProbabilities:
    def test_identical_vectors_are_a_fixed_point(self):
        v = random_simplex(np.random.default_rng(0), 1)[0]
        out = average_probabilities([v] * 5)
        np.testing.assert_allclose(out, v, atol=1e-15)

    def test_hand_mean_of_two_corners(self):
        e0 = np.zeros(NUM_CLASSES)
        e0[0] = 1.0
        e1 = np.zeros(NUM_CLASSES)
        e1[1] = 1.0
        out = average_probabilities([e0, e1])
        want = np.zeros(NUM_CLASSES)
        want[0] = want[1] = 0.5
        np.testing.assert_allclose(out, want, atol=1e-15)

    def test_simplex_closure(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            vs = random_simplex(rng, int(rng.integers(1, 9)))
            out = average_probabilities(list(vs))
            assert abs(out.sum() - 1.0) <= 1e-6
            assert (out >= 0).all()

    def test_convexity_bounds(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            vs = random_simplex(rng, 6)
            out = average_probabilities(list(vs))
            assert (out >= vs.min(axis=0) - 1e-12).all()
            assert (out <= vs.max(axis=0) + 1e-12).all()

    def test_order_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            vs = list(random_simplex(rng, 7))
            base = average_probabilities(vs)
            perm = [vs[i] for i in rng.permutation(len(vs))]
            np.testing.assert_allclose(average_probabilities(perm), base, atol=1e-9)

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            average_probabilities([])
        with pytest.raises(ValueError):
            average_probabilities([np.full(NUM_CLASSES, 0.5)])
        with pytest.raises(ValueError):
            average_probabilities([np.ones(3)])


@pytest.fixture(scope="module")
def tiny_checkpoints(tmp_path_factory):
    base = tmp_path_factory.mktemp("ens_ckpts")
    paths = []
    for i in range(2):
        torch.manual_seed(100 + i)
        model = build_model(TINY)
        paths.append(save_checkpoint(model, base / f"m{i}.pt"))
    return paths


class TestEnsemblePredict:
    def test_single_member_no_tta_equals_plain_inference(self, tiny_checkpoints):
        spec = EnsembleSpec(checkpoint_paths=(tiny_checkpoints[0],), tta_n=1)
        rng = np.random.default_rng(5)
        img = rng.random((120, 160, 3)).astype(np.float32)
        got = predict(spec, img)
        from lesionclf.augment import preprocess_eval
        from lesionclf.models import load_checkpoint

        model = load_checkpoint(tiny_checkpoints[0])
        want = predict_probabilities(model, preprocess_eval(img))[0]
        np.testing.assert_allclose(got, want, atol=1e-7)

    def test_duplicated_member_changes_nothing(self, tiny_checkpoints):
        rng = np.random.default_rng(6)
        img = rng.random((120, 160, 3)).astype(np.float32)
        one = predict(EnsembleSpec(checkpoint_paths=(tiny_checkpoints[0],)), img)
        two = predict(
            EnsembleSpec(checkpoint_paths=(tiny_checkpoints[0], tiny_checkpoints[0])), img
        )
        np.testing.assert_allclose(one, two, atol=1e-12)

    def test_member_order_does_not_matter(self, tiny_checkpoints):
        rng = np.random.default_rng(7)
        img = rng.random((120, 160, 3)).astype(np.float32)
        a = predict(EnsembleSpec(checkpoint_paths=tuple(tiny_checkpoints), tta_n=3), img)
        b = predict(EnsembleSpec(checkpoint_paths=tuple(reversed(tiny_checkpoints)), tta_n=3), img)
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_prediction_stays_on_simplex(self, tiny_checkpoints):
        rng = np.random.default_rng(8)
        ens = Ensemble(EnsembleSpec(checkpoint_paths=tuple(tiny_checkpoints), tta_n=4))
        for _ in range(5):
            img = rng.random((90, 130, 3)).astype(np.float32)
            out = ens.predict(img)
            assert abs(out.sum() - 1.0) <= 1e-6
            assert (out >= 0).all()

    def test_spec_validation(self, tiny_checkpoints):
        with pytest.raises(ConfigError):
            EnsembleSpec(checkpoint_paths=())
        with pytest.raises(ConfigError):
            EnsembleSpec(checkpoint_paths=(tiny_checkpoints[0],), tta_n=0)

    def test_mismatched_heads_rejected(self, tiny_checkpoints, tmp_path):
        torch.manual_seed(0)
        other = build_model(dataclasses.replace(TINY, num_classes=5))
        bad = save_checkpoint(other, tmp_path / "five.pt")
        with pytest.raises(CheckpointError, match="num_classes"):
            Ensemble(EnsembleSpec(checkpoint_paths=(tiny_checkpoints[0], bad)))


@pytest.fixture(scope="module")
def mini_eval(mini_dataset):
    records = load_catalog(mini_dataset["metadata"], mini_dataset["images"])
    manifest = make_split(records, seed=5, test_fraction=0.25, val_fraction=0.25)
    return records, manifest


class TestEvaluateEnsemble:
    def test_reports_have_both_flavours_and_invariants(self, mini_eval, tiny_checkpoints):
        records, manifest = mini_eval
        spec = EnsembleSpec(checkpoint_paths=tuple(tiny_checkpoints), tta_n=3, tta_seed=1)
        reports = evaluate_ensemble(spec, manifest, records)
        assert set(reports) == {"ensemble", "tta"}
        n_test = len(eval_ids(manifest, records, "test"))
        for report in reports.values():
            assert report.confusion.total == n_test
            assert 0 <= report.accuracy <= 1
            assert report.top_k[1] <= report.top_k[2] <= report.top_k[3]

    def test_no_tta_report_when_single_view(self, mini_eval, tiny_checkpoints):
        records, manifest = mini_eval
        spec = EnsembleSpec(checkpoint_paths=(tiny_checkpoints[0],), tta_n=1)
        reports = evaluate_ensemble(spec, manifest, records)
        assert set(reports) == {"ensemble"}

    def test_deterministic_across_runs(self, mini_eval, tiny_checkpoints):
        records, manifest = mini_eval
        spec = EnsembleSpec(checkpoint_paths=tuple(tiny_checkpoints), tta_n=3, tta_seed=9)
        r1 = evaluate_ensemble(spec, manifest, records)
        r2 = evaluate_ensemble(spec, manifest, records)
        assert r1["tta"].to_dict() == r2["tta"].to_dict()
        assert r1["ensemble"].to_dict() == r2["ensemble"].to_dict()
