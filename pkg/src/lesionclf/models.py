"""Classifier assembly: a convolutional backbone with its stock top removed,
then global average pooling (or flatten, for the ablation variant) feeding a
dense -> relu -> dropout -> dense -> softmax head.

Input normalization lives inside the model, so callers always supply images
with values in [0, 1]; each backbone normalizes with the channel statistics
of its pretraining corpus.
"""

from __future__ import annotations

import dataclasses
import urllib.error
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import CheckpointError, ConfigError, DataError

CHECKPOINT_FORMAT_VERSION = 1

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class BackboneKind:
    name: str
    feature_channels: int


@dataclass(frozen=True)
class ModelSpec:
    backbone: str = "resnet50"
    num_classes: int = 7
    use_gap: bool = True
    dropout_rate: float = 0.5
    hidden_width: int = 512
    pretrained: bool = True
    all_layers_trainable: bool = True

    def __post_init__(self):
        if self.backbone not in _REGISTRY:
            raise ConfigError(
                f"unknown backbone {self.backbone!r}; registered: {list_backbones()}"
            )
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.hidden_width < 1:
            raise ConfigError(f"hidden_width must be positive, got {self.hidden_width}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def _tiny_test_features() -> nn.Sequential:
    # 4 conv blocks, ~170k parameters; exists so the full pipeline runs on a
    # CPU in minutes.
    chans = [3, 16, 32, 64, 128]
    layers: list[nn.Module] = []
    for cin, cout in zip(chans, chans[1:]):
        layers += [
            nn.Conv2d(cin, cout, kernel_size=3, stride=2, padding=1),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        ]
    return nn.Sequential(*layers)


def _torchvision_features(name: str, pretrained: bool) -> nn.Module:
    import torchvision.models as tvm

    builders = {
        "resnet50": (tvm.resnet50, tvm.ResNet50_Weights.IMAGENET1K_V2),
        "vgg16": (tvm.vgg16, tvm.VGG16_Weights.IMAGENET1K_V1),
        "mobilenet": (tvm.mobilenet_v2, tvm.MobileNet_V2_Weights.IMAGENET1K_V1),
        "efficientnet_b1": (tvm.efficientnet_b1, tvm.EfficientNet_B1_Weights.IMAGENET1K_V1),
    }
    builder, weights = builders[name]
    try:
        net = builder(weights=weights if pretrained else None)
    except (urllib.error.URLError, OSError) as e:
        raise DataError(
            f"pretrained weights for {name!r} are unavailable ({e}); "
            "set pretrained=false or provide a local torch hub cache"
        ) from e
    if name == "resnet50":
        return nn.Sequential(
            net.conv1, net.bn1, net.relu, net.maxpool,
            net.layer1, net.layer2, net.layer3, net.layer4,
        )
    return net.features


def _build_features(name: str, pretrained: bool) -> tuple[nn.Module, tuple, tuple]:
    if name == "tiny_test":
        if pretrained:
            raise ConfigError("tiny_test is a from-scratch backbone; it has no pretrained weights")
        return _tiny_test_features(), (0.5, 0.5, 0.5), (0.5, 0.5, 0.5)
    return _torchvision_features(name, pretrained), IMAGENET_MEAN, IMAGENET_STD


_REGISTRY = ("resnet50", "vgg16", "mobilenet", "efficientnet_b1", "tiny_test")


def list_backbones() -> list[str]:
    return list(_REGISTRY)


class LesionClassifier(nn.Module):
    """Backbone features -> pool/flatten -> dense head -> softmax."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        features, mean, std = _build_features(spec.backbone, spec.pretrained)
        self.features = features
        self.register_buffer("input_mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("input_std", torch.tensor(std).view(1, 3, 1, 1))

        with torch.no_grad():
            probe = self.features(torch.zeros(1, 3, 224, 224))
        channels, fh, fw = probe.shape[1], probe.shape[2], probe.shape[3]
        self.backbone_kind = BackboneKind(spec.backbone, int(channels))
        head_in = channels if spec.use_gap else channels * fh * fw
        self.head = nn.Sequential(
            nn.Linear(head_in, spec.hidden_width),
            nn.ReLU(inplace=True),
            nn.Dropout(spec.dropout_rate),
            nn.Linear(spec.hidden_width, spec.num_classes),
        )
        if not spec.all_layers_trainable:
            for p in self.features.parameters():
                p.requires_grad = False

    @property
    def feature_channels(self) -> int:
        return self.backbone_kind.feature_channels

    def forward_features(self, x: torch.Tensor) -> torch.Tensor:
        return self.features((x - self.input_mean) / self.input_std)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        f = self.forward_features(x)
        pooled = f.mean(dim=(2, 3)) if self.spec.use_gap else torch.flatten(f, 1)
        return self.head(pooled)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(x), dim=1)


def build_model(spec: ModelSpec) -> LesionClassifier:
    return LesionClassifier(spec)


def to_batch_tensor(images) -> torch.Tensor:
    """Stack HxWx3 [0,1] arrays (or one array, or an NxHxWx3 array) into an
    NCHW float tensor."""
    a = np.asarray(images, dtype=np.float32)
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4 or a.shape[3] != 3:
        raise ValueError(f"expected images shaped (n, h, w, 3), got {a.shape}")
    return torch.from_numpy(np.ascontiguousarray(a.transpose(0, 3, 1, 2)))


def predict_probabilities(model: LesionClassifier, images, batch_size: int = 64) -> np.ndarray:
    """Eval-mode class probabilities for a batch of [0,1] images, (n, 7)."""
    x = to_batch_tensor(images)
    model.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, x.shape[0], batch_size):
            outs.append(model(x[i : i + batch_size]).numpy())
    return np.concatenate(outs, axis=0)


def save_checkpoint(model: LesionClassifier, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "model_spec": model.spec.to_dict(),
            "state_dict": model.state_dict(),
        },
        path,
    )
    return path


def load_checkpoint(path: Path | str, num_classes: int | None = None) -> LesionClassifier:
    """Rebuild the model recorded in a checkpoint and restore its parameters.

    ``num_classes`` cross-checks the stored spec; a mismatch raises rather
    than silently returning a model with the wrong head.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or "state_dict" not in payload or "model_spec" not in payload:
        raise CheckpointError(f"{path} is not a model checkpoint")
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint format version {payload.get('format_version')!r}"
        )
    stored = ModelSpec.from_dict(payload["model_spec"])
    if num_classes is not None and stored.num_classes != num_classes:
        raise CheckpointError(
            f"{path}: checkpoint has num_classes={stored.num_classes}, requested {num_classes}"
        )
    # parameters come from the file; never re-fetch pretraining weights here
    build_spec = dataclasses.replace(stored, pretrained=False)
    model = build_model(build_spec)
    model.load_state_dict(payload["state_dict"])
    model.spec = stored
    model.eval()
    return model
