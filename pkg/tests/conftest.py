import random

import pytest

from lesionclf.catalog import LesionRecord
from lesionclf.labels import ALL_LABELS, ClassLabel
from lesionclf.toydata import generate_toy_dataset

# image / lesion counts mirroring the real catalog's structure:
# 10,015 images over 7,470 distinct lesions, nv largest (6,705 images),
# df smallest (115 images)
HAM_IMAGE_COUNTS = {
    "akiec": 327, "bcc": 514, "bkl": 1099, "df": 115, "mel": 1113, "nv": 6705, "vasc": 142,
}
HAM_LESION_COUNTS = {
    "akiec": 228, "bcc": 327, "bkl": 727, "df": 73, "mel": 614, "nv": 5403, "vasc": 98,
}


def make_records(spec: dict[str, tuple[int, int]], prefix: str = "SYN") -> list[LesionRecord]:
    """Synthetic catalog: spec maps class code -> (n_lesions, n_images)."""
    records = []
    for code, (n_lesions, n_images) in spec.items():
        label = ClassLabel.from_code(code)
        assert n_images >= n_lesions
        lesion_ids = [f"{prefix}_L_{code}_{j:05d}" for j in range(n_lesions)]
        # every lesion gets one image, extras are dealt round-robin
        owners = list(lesion_ids)
        for j in range(n_images - n_lesions):
            owners.append(lesion_ids[j % n_lesions])
        for i, lesion_id in enumerate(owners):
            image_id = f"{prefix}_I_{code}_{i:05d}"
            records.append(
                LesionRecord(
                    image_id=image_id,
                    lesion_id=lesion_id,
                    label=label,
                    image_path=f"/nonexistent/{image_id}.jpg",
                )
            )
    return records


def random_catalog(rng: random.Random, max_skew: int = 58) -> list[LesionRecord]:
    """Random synthetic catalog with class skew up to max_skew : 1; every
    class keeps at least 5 lesions so a 0.2/0.2 split with k=2 is feasible."""
    base = rng.randint(5, 40)
    spec = {}
    for label in ALL_LABELS:
        n_lesions = base * rng.randint(1, max_skew) // rng.randint(1, 10) + 5
        n_images = n_lesions + rng.randint(0, n_lesions)
        spec[label.code] = (n_lesions, n_images)
    return make_records(spec, prefix=f"R{rng.randint(0, 10**6)}")


@pytest.fixture(scope="session")
def ham_like_records() -> list[LesionRecord]:
    spec = {c: (HAM_LESION_COUNTS[c], HAM_IMAGE_COUNTS[c]) for c in HAM_IMAGE_COUNTS}
    return make_records(spec, prefix="HAM")


@pytest.fixture(scope="session")
def mini_dataset(tmp_path_factory) -> dict:
    """Small on-disk toy dataset for fast trainer/CLI tests."""
    root = tmp_path_factory.mktemp("mini_toy")
    generate_toy_dataset(
        root,
        lesions_per_class={c.code: 8 for c in ALL_LABELS},
        n_duplicates=24,
        seed=11,
    )
    return {"root": root, "metadata": root / "metadata.csv", "images": root / "images"}
