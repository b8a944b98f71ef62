"""Image transform pipelines: training augmentation, eval preprocessing and
test-time augmentation variants.

Images are H x W x 3 float arrays with values in [0, 1], RGB order. Every
pipeline ends in a bilinear resize to 224 x 224 and is fully deterministic
given (image, spec, seed). Rotation fills the exposed corners by edge
reflection so no black wedges appear for attention maps to latch onto.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .errors import ConfigError
from .seeding import derive_seed

OUTPUT_SIZE = (224, 224)
CUTOUT_FRAME_SIDE = 256


@dataclass(frozen=True)
class TransformSpec:
    """Toggleable augmentation stages, applied in declaration order."""

    rotate: bool = True
    max_degrees: float = 180.0
    hflip: bool = True
    vflip: bool = True
    crop: bool = True
    crop_scale: tuple[float, float] = (0.8, 1.0)
    cutout: bool = False
    cutout_side: int = 32
    cutout_count: int = 1

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not (0 < lo <= hi <= 1):
            raise ConfigError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        if self.max_degrees < 0:
            raise ConfigError(f"max_degrees must be >= 0, got {self.max_degrees}")
        if self.cutout and self.cutout_side >= OUTPUT_SIZE[0]:
            raise ConfigError(
                f"cutout side {self.cutout_side} must be smaller than the output side {OUTPUT_SIZE[0]}"
            )
        if self.cutout and (self.cutout_side < 1 or self.cutout_count < 1):
            raise ConfigError("cutout needs side >= 1 and count >= 1")

    @property
    def identity(self) -> bool:
        return not (self.rotate or self.hflip or self.vflip or self.crop or self.cutout)


# training default: everything on, including cutout
TRAIN_SPEC = TransformSpec(cutout=True)
# TTA keeps only label-preserving, non-destructive stages
TTA_SPEC = TransformSpec(rotate=True, hflip=True, vflip=True, crop=False, cutout=False)
NO_AUGMENT_SPEC = TransformSpec(rotate=False, hflip=False, vflip=False, crop=False, cutout=False)


def _validate_image(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float32)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {np.shape(img)}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"image has empty dimensions: {a.shape}")
    if a.min() < 0 or a.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    return a


def _resize(img: np.ndarray, width: int, height: int) -> np.ndarray:
    out = cv2.resize(img, (width, height), interpolation=cv2.INTER_LINEAR)
    return np.clip(out, 0.0, 1.0)


def hflip(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[:, ::-1, :])


def vflip(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[::-1, :, :])


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    h, w = img.shape[:2]
    m = cv2.getRotationMatrix2D((w / 2.0, h / 2.0), degrees, 1.0)
    out = cv2.warpAffine(
        img, m, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT_101
    )
    return np.clip(out, 0.0, 1.0)


def apply_cutout(img: np.ndarray, side: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Zero ``count`` random side x side squares, each fully inside bounds."""
    h, w = img.shape[:2]
    if side > min(h, w):
        raise ConfigError(f"cutout side {side} exceeds the {h}x{w} frame")
    out = img.copy()
    for _ in range(count):
        y0 = int(rng.integers(0, h - side + 1))
        x0 = int(rng.integers(0, w - side + 1))
        out[y0 : y0 + side, x0 : x0 + side, :] = 0.0
    return out


def preprocess_eval(img) -> np.ndarray:
    """Bilinear resize to 224 x 224, nothing else."""
    a = _validate_image(img)
    return _resize(a, OUTPUT_SIZE[1], OUTPUT_SIZE[0])


def augment_train(img, spec: TransformSpec, seed: int) -> np.ndarray:
    """Random rotation, flips, area crop and cutout, then resize to 224 x 224.

    Stages run in that fixed order; each enabled stage consumes draws from a
    PRNG seeded with ``seed``, so equal (image, spec, seed) yields a
    bit-identical result. Cutout zeroes squares inside a frame whose shorter
    side is first resized to 256 px, keeping the occluded area a fixed
    fraction of the image regardless of the source resolution.
    """
    a = _validate_image(img)
    if spec.identity:
        return preprocess_eval(a)
    rng = np.random.default_rng(seed)

    if spec.rotate:
        a = rotate(a, float(rng.uniform(-spec.max_degrees, spec.max_degrees)))
    if spec.hflip and rng.random() < 0.5:
        a = hflip(a)
    if spec.vflip and rng.random() < 0.5:
        a = vflip(a)
    if spec.crop:
        h, w = a.shape[:2]
        scale = float(rng.uniform(*spec.crop_scale))
        side = np.sqrt(scale)
        ch = max(1, int(round(h * side)))
        cw = max(1, int(round(w * side)))
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        a = a[y0 : y0 + ch, x0 : x0 + cw, :]
    if spec.cutout:
        h, w = a.shape[:2]
        f = CUTOUT_FRAME_SIDE / min(h, w)
        a = _resize(a, max(1, int(round(w * f))), max(1, int(round(h * f))))
        a = apply_cutout(a, spec.cutout_side, spec.cutout_count, rng)
    return _resize(a, OUTPUT_SIZE[1], OUTPUT_SIZE[0])


def tta_variants(img, n: int, seed: int, spec: TransformSpec = TTA_SPEC) -> list[np.ndarray]:
    """n views of one image: the plain eval view first, then n-1 lightly
    augmented ones with per-variant derived seeds."""
    if n < 1:
        raise ConfigError(f"tta variant count must be >= 1, got {n}")
    a = _validate_image(img)
    out = [preprocess_eval(a)]
    for i in range(1, n):
        out.append(augment_train(a, spec, derive_seed(seed, "tta", i)))
    return out
