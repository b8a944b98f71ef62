"""GradCAM attention heatmaps: where the final convolutional features
support a chosen class.

Channel weights are the spatial means of the gradient of the pre-softmax
class score with respect to the final feature map; the rectified weighted
sum is upsampled to the 224 x 224 input frame and min-max normalized per
image.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch

from .augment import preprocess_eval
from .errors import ConfigError, DataError
from .labels import ClassLabel

BLEND_WEIGHT = 0.4


@dataclass
class Heatmap:
    values: np.ndarray  # 224 x 224, in [0, 1]
    target_class: ClassLabel
    source_layer: str
    degenerate: bool = False


def gradcam(model, image, target_class: ClassLabel | int) -> Heatmap:
    """Class-attention heatmap for one image.

    The model must expose a ``features`` module producing the final
    convolutional feature map and a ``logits`` method (every registered
    backbone wrapper does).
    """
    if not hasattr(model, "features") or not hasattr(model, "logits"):
        raise ConfigError(
            "gradcam needs a model with a 'features' convolutional stage and a 'logits' method"
        )
    target = target_class if isinstance(target_class, ClassLabel) else ClassLabel.from_index(int(target_class))

    x = preprocess_eval(image)
    tensor = torch.from_numpy(x.transpose(2, 0, 1)[None]).requires_grad_(True)

    captured: dict[str, torch.Tensor] = {}

    def keep_activation(module, inputs, output):
        output.retain_grad()
        captured["activation"] = output

    handle = model.features.register_forward_hook(keep_activation)
    try:
        model.eval()
        model.zero_grad(set_to_none=True)
        logits = model.logits(tensor)
        logits[0, target.index].backward()
    finally:
        handle.remove()

    activation = captured["activation"]
    if activation.ndim != 4:
        raise ConfigError("the features stage does not produce a spatial feature map")
    grads = activation.grad
    weights = grads.mean(dim=(2, 3))  # (1, C)
    raw = torch.relu((weights[:, :, None, None] * activation).sum(dim=1))[0]
    raw = raw.detach().numpy().astype(np.float32)
    raw = cv2.resize(raw, (x.shape[1], x.shape[0]), interpolation=cv2.INTER_LINEAR)

    lo, hi = float(raw.min()), float(raw.max())
    if hi == 0.0:
        return Heatmap(np.zeros_like(raw), target, "features", degenerate=True)
    if hi == lo:
        # non-zero but spatially constant: every location equally implicated
        return Heatmap(np.ones_like(raw), target, "features", degenerate=True)
    return Heatmap((raw - lo) / (hi - lo), target, "features")


def overlay(image, heatmap: Heatmap, out_path: Path | str) -> dict[str, Path]:
    """Blend a color-mapped heatmap onto the image and write it as PNG,
    with the raw heatmap alongside as a grayscale PNG."""
    from matplotlib import colormaps
    from PIL import Image

    vals = np.asarray(heatmap.values, dtype=np.float32)
    if vals.ndim != 2 or vals.min() < 0 or vals.max() > 1:
        raise ValueError("heatmap values must be a 2-d array in [0, 1]")
    base = preprocess_eval(image)
    if vals.shape != base.shape[:2]:
        raise ValueError(f"heatmap shape {vals.shape} does not match the image frame {base.shape[:2]}")

    colored = colormaps["jet"](vals)[:, :, :3].astype(np.float32)
    blended = (1.0 - BLEND_WEIGHT) * base + BLEND_WEIGHT * colored

    out_path = Path(out_path)
    sidecar = out_path.with_name(out_path.stem + "_heatmap.png")
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.round(blended * 255.0).astype(np.uint8)).save(out_path)
        Image.fromarray(np.round(vals * 255.0).astype(np.uint8), mode="L").save(sidecar)
    except OSError as e:
        raise DataError(f"failed writing overlay {out_path}: {e}") from e
    return {"overlay": out_path, "heatmap": sidecar}
