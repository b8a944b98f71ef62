import cv2
import numpy as np
import pytest
import torch
import torch.nn as nn
from PIL import Image

from lesionclf.gradcam import Heatmap, gradcam, overlay
from lesionclf.errors import ConfigError
from lesionclf.labels import ALL_LABELS, NUM_CLASSES, ClassLabel
from lesionclf.models import ModelSpec, build_model


class BlockPoolFeatures(nn.Module):
    """Single-channel 2x2 feature map: block means of the red channel."""

    def forward(self, x):
        return nn.functional.adaptive_avg_pool2d(x[:, :1, :, :], (2, 2))


class HandToyModel(nn.Module):
    """y_c = W[c] * spatial_mean(A) with a known weight vector, so the
    attention map has a pencil-and-paper closed form."""

    def __init__(self, class_weights):
        super().__init__()
        self.features = BlockPoolFeatures()
        self.linear = nn.Linear(1, NUM_CLASSES, bias=False)
        with torch.no_grad():
            self.linear.weight.copy_(torch.tensor(class_weights).view(NUM_CLASSES, 1))

    def logits(self, x):
        pooled = self.features(x).mean(dim=(2, 3))
        return self.linear(pooled)

    def forward(self, x):
        return torch.softmax(self.logits(x), dim=1)


def quadrant_image(values):
    """224x224 image whose red channel has constant 112x112 quadrants."""
    img = np.zeros((224, 224, 3), dtype=np.float32)
    (a, b), (c, d) = values
    img[:112, :112, 0] = a
    img[:112, 112:, 0] = b
    img[112:, :112, 0] = c
    img[112:, 112:, 0] = d
    return img


class TestClosedForm:
    def test_matches_hand_computation(self):
        # A = [[1.0, 0.25], [0.5, 0.75]] (exactly representable block means);
        # for class 0 with weight w = 2: alpha = w/4 = 0.5,
        # raw = relu(0.5 * A) = [[.5, .125], [.25, .375]]
        weights = [2.0, -1.0, 0.5, 0.1, 0.3, 0.2, 0.4]
        model = HandToyModel(weights)
        img = quadrant_image([[1.0, 0.25], [0.5, 0.75]])
        heat = gradcam(model, img, ALL_LABELS[0])
        assert not heat.degenerate
        # expected: alpha_k * A, rectified, upsampled, min-max normalized
        a = np.array([[1.0, 0.25], [0.5, 0.75]], dtype=np.float32)
        raw = np.maximum((weights[0] / 4.0) * a, 0.0)
        raw = cv2.resize(raw, (224, 224), interpolation=cv2.INTER_LINEAR)
        want = (raw - raw.min()) / (raw.max() - raw.min())
        np.testing.assert_allclose(heat.values, want, atol=1e-6)
        # hottest corner is the quadrant with the largest activation
        assert heat.values[0, 0] == pytest.approx(1.0, abs=1e-6)
        assert heat.values[0, 223] == pytest.approx(0.0, abs=1e-6)

    def test_negative_weight_gives_zero_map_with_flag(self):
        model = HandToyModel([-2.0] + [0.1] * (NUM_CLASSES - 1))
        img = quadrant_image([[1.0, 0.25], [0.5, 0.75]])
        heat = gradcam(model, img, 0)
        assert heat.degenerate
        np.testing.assert_array_equal(heat.values, np.zeros((224, 224), dtype=np.float32))

    def test_constant_feature_map_flagged_degenerate(self):
        model = HandToyModel([2.0] + [0.1] * (NUM_CLASSES - 1))
        img = quadrant_image([[0.5, 0.5], [0.5, 0.5]])
        heat = gradcam(model, img, 0)
        assert heat.degenerate
        assert len(np.unique(heat.values)) == 1


@pytest.fixture(scope="module")
def tiny_model():
    torch.manual_seed(4)
    return build_model(ModelSpec(backbone="tiny_test", pretrained=False))


class TestContracts:
    def test_shape_and_range_on_random_inputs(self, tiny_model):
        rng = np.random.default_rng(0)
        for i in range(10):
            img = rng.random((100, 140, 3)).astype(np.float32)
            heat = gradcam(tiny_model, img, int(rng.integers(0, NUM_CLASSES)))
            assert heat.values.shape == (224, 224)
            assert heat.values.min() >= 0.0
            assert heat.values.max() <= 1.0
            if not heat.degenerate:
                assert heat.values.max() == pytest.approx(1.0, abs=1e-6)

    def test_target_class_recorded(self, tiny_model):
        img = np.random.default_rng(1).random((64, 64, 3)).astype(np.float32)
        heat = gradcam(tiny_model, img, ClassLabel.MEL)
        assert heat.target_class is ClassLabel.MEL
        assert heat.source_layer == "features"

    def test_model_without_features_rejected(self):
        with pytest.raises(ConfigError):
            gradcam(nn.Linear(3, 7), np.zeros((8, 8, 3), dtype=np.float32), 0)


class TestOverlay:
    def test_writes_224_png_with_sidecar(self, tmp_path):
        rng = np.random.default_rng(2)
        img = rng.random((120, 160, 3)).astype(np.float32)
        vals = rng.random((224, 224)).astype(np.float32)
        heat = Heatmap(vals, ClassLabel.NV, "features")
        paths = overlay(img, heat, tmp_path / "x.png")
        with Image.open(paths["overlay"]) as im:
            assert im.size == (224, 224)
        with Image.open(paths["heatmap"]) as im:
            assert im.size == (224, 224)
            decoded = np.asarray(im, dtype=np.float32) / 255.0
        np.testing.assert_allclose(decoded, vals, atol=1.0 / 255.0 + 1e-6)

    def test_zero_heatmap_is_deterministic(self, tmp_path):
        img = np.random.default_rng(3).random((64, 64, 3)).astype(np.float32)
        heat = Heatmap(np.zeros((224, 224), dtype=np.float32), ClassLabel.NV, "features")
        p1 = overlay(img, heat, tmp_path / "a.png")
        p2 = overlay(img, heat, tmp_path / "b.png")
        assert p1["overlay"].read_bytes() == p2["overlay"].read_bytes()

    def test_invalid_heatmap_rejected(self, tmp_path):
        img = np.zeros((32, 32, 3), dtype=np.float32)
        bad = Heatmap(np.full((224, 224), 1.5, dtype=np.float32), ClassLabel.NV, "features")
        with pytest.raises(ValueError):
            overlay(img, bad, tmp_path / "bad.png")
