"""Synthetic desk-scale dataset: seven shape/color classes rendered as JPEGs
with HAM10000-style metadata, duplicate views per lesion, and recorded object
bounding boxes for attention-map sanity checks.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .labels import ALL_LABELS, ClassLabel
from .seeding import derive_seed

# one saturated color per class; shape cycles circle / square / triangle
CLASS_COLORS = {
    "akiec": (0.90, 0.15, 0.15),
    "bcc": (0.15, 0.85, 0.20),
    "bkl": (0.20, 0.30, 0.95),
    "df": (0.95, 0.90, 0.15),
    "mel": (0.90, 0.20, 0.90),
    "nv": (0.15, 0.90, 0.90),
    "vasc": (0.95, 0.55, 0.10),
}
SHAPES = ("circle", "square", "triangle")
BACKGROUND = np.array([0.35, 0.26, 0.24], dtype=np.float32)

DEFAULT_LESIONS_PER_CLASS = {
    "akiec": 40, "bcc": 50, "bkl": 60, "df": 45, "mel": 70, "nv": 135, "vasc": 90,
}  # 490 lesions


def _object_mask(shape: str, h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    if shape == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
    if shape == "square":
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    # triangle: apex up, clipped half-planes
    return (
        (yy <= cy + r * 0.8)
        & (yy - (cy - r) >= 1.2 * (xx - cx))
        & (yy - (cy - r) >= 1.2 * (cx - xx))
    )


def _render(label: ClassLabel, params: dict, rng: np.random.Generator, h: int, w: int):
    img = np.tile(BACKGROUND, (h, w, 1)).astype(np.float32)
    img += rng.normal(0.0, 0.02, size=img.shape).astype(np.float32)

    cy, cx, r = params["cy"] * h, params["cx"] * w, params["r"] * min(h, w)
    # duplicate views jitter the pose a little, like a second photo
    cy += rng.uniform(-0.02, 0.02) * h
    cx += rng.uniform(-0.02, 0.02) * w
    r *= rng.uniform(0.92, 1.08)

    mask = _object_mask(params["shape"], h, w, cy, cx, r)
    color = np.array(CLASS_COLORS[label.code], dtype=np.float32)
    color = np.clip(color + rng.normal(0.0, 0.02, size=3).astype(np.float32), 0, 1)
    img[mask] = color
    img = np.clip(img, 0.0, 1.0)

    ys, xs = np.nonzero(mask)
    box = [float(xs.min()) / w, float(ys.min()) / h, float(xs.max() + 1) / w, float(ys.max() + 1) / h]
    return img, box


def generate_toy_dataset(
    out_dir: Path | str,
    lesions_per_class: dict[str, int] | None = None,
    n_duplicates: int = 210,
    seed: int = 0,
    image_size: tuple[int, int] = (120, 160),
) -> Path:
    """Write images/, metadata.csv and boxes.json under ``out_dir``.

    Produces sum(lesions_per_class) distinct lesions plus ``n_duplicates``
    extra views spread over randomly chosen lesions, mirroring the real
    catalog's image/lesion mismatch.
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    lesions_per_class = dict(lesions_per_class or DEFAULT_LESIONS_PER_CLASS)
    h, w = image_size

    master = np.random.default_rng(derive_seed(seed, "toy"))
    lesions: list[tuple[str, ClassLabel, dict]] = []
    for label in ALL_LABELS:
        for j in range(lesions_per_class.get(label.code, 0)):
            lesion_id = f"TL_{label.code}_{j:04d}"
            lrng = np.random.default_rng(derive_seed(seed, "lesion", lesion_id))
            params = {
                "shape": SHAPES[label.index % len(SHAPES)],
                "cy": float(lrng.uniform(0.3, 0.7)),
                "cx": float(lrng.uniform(0.3, 0.7)),
                "r": float(lrng.uniform(0.14, 0.22)),
            }
            lesions.append((lesion_id, label, params))

    views: list[tuple[str, ClassLabel, dict, int]] = [
        (lesion_id, label, params, 0) for lesion_id, label, params in lesions
    ]
    for _ in range(n_duplicates):
        lesion_id, label, params = lesions[int(master.integers(0, len(lesions)))]
        dup_index = sum(1 for v in views if v[0] == lesion_id)
        views.append((lesion_id, label, params, dup_index))

    rows = ["lesion_id,image_id,dx"]
    boxes: dict[str, list[float]] = {}
    for i, (lesion_id, label, params, dup_index) in enumerate(
        sorted(views, key=lambda v: (v[0], v[3]))
    ):
        image_id = f"TOY_{i:07d}"
        rng = np.random.default_rng(derive_seed(seed, "view", lesion_id, dup_index))
        img, box = _render(label, params, rng, h, w)
        Image.fromarray(np.round(img * 255).astype(np.uint8)).save(images_dir / f"{image_id}.jpg", quality=92)
        rows.append(f"{lesion_id},{image_id},{label.code}")
        boxes[image_id] = box

    (out_dir / "metadata.csv").write_text("\n".join(rows) + "\n")
    (out_dir / "boxes.json").write_text(json.dumps(boxes, indent=0, sort_keys=True))
    return out_dir


def main(argv=None) -> int:
    import argparse

    parser = argparse.ArgumentParser(description="generate the synthetic shape/color dataset")
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--duplicates", type=int, default=210)
    args = parser.parse_args(argv)
    root = generate_toy_dataset(args.out_dir, seed=args.seed, n_duplicates=args.duplicates)
    print(f"wrote {root}/metadata.csv, images/, boxes.json")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
