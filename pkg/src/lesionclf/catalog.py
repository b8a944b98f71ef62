"""Dataset catalog: metadata ingestion, duplicate-aware statistics, and
deterministic leakage-safe stratified splits.

A "lesion" is a physical skin site; one lesion may appear in several images
(different angles / magnifications). All split logic operates on lesions so
that no lesion ever straddles two subsets. Every image of a lesion is assigned
to the lesion's subset; evaluation additionally restricts val/test to one
canonical image per lesion (the lexicographically smallest image_id) so that
duplicates never bias reported metrics.
"""

from __future__ import annotations

import csv
import json
import math
import random
import warnings
from dataclasses import dataclass, field
from pathlib import Path

from .errors import CatalogError, ConfigError, IntegrityError
from .labels import ALL_LABELS, ClassLabel

REQUIRED_COLUMNS = ("lesion_id", "image_id", "dx")


@dataclass(frozen=True)
class LesionRecord:
    """One image row of the catalog."""

    image_id: str
    lesion_id: str
    label: ClassLabel
    image_path: Path
    width: int | None = None
    height: int | None = None


@dataclass(frozen=True)
class ClassDistribution:
    """Per-class counts at either image or lesion granularity."""

    counts: dict[ClassLabel, int]
    total: int

    def __post_init__(self):
        if self.total != sum(self.counts.values()):
            raise IntegrityError("distribution total does not match the sum of per-class counts")


@dataclass(frozen=True)
class ClassWeights:
    """Positive per-class loss weights."""

    weights: dict[ClassLabel, float]

    def __post_init__(self):
        bad = {c.code: w for c, w in self.weights.items() if not w > 0}
        if bad:
            raise ConfigError(f"class weights must be positive, got {bad}")

    def as_vector(self) -> list[float]:
        return [self.weights[c] for c in ALL_LABELS]


@dataclass
class SplitManifest:
    """Deterministic assignment of every image to train/val/test and to folds.

    ``ratios`` is (test_fraction, val_fraction); the test fraction applies to
    the full lesion set, the val fraction to the lesions remaining after the
    test pool is removed. ``fold_of`` covers every image of the train+val pool
    when k-fold assignment was requested, otherwise it is empty and k == 0.
    """

    seed: int
    ratios: tuple[float, float]
    k: int
    test_ids: set[str]
    val_ids: set[str]
    train_ids: set[str]
    fold_of: dict[str, int] = field(default_factory=dict)

    def subset_of(self, image_id: str) -> str:
        if image_id in self.test_ids:
            return "test"
        if image_id in self.val_ids:
            return "val"
        if image_id in self.train_ids:
            return "train"
        raise KeyError(image_id)

    def to_json(self) -> str:
        payload = {
            "seed": self.seed,
            "ratios": list(self.ratios),
            "k": self.k,
            "test": sorted(self.test_ids),
            "val": sorted(self.val_ids),
            "train": sorted(self.train_ids),
            "folds": {i: self.fold_of[i] for i in sorted(self.fold_of)},
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        d = json.loads(text)
        return cls(
            seed=int(d["seed"]),
            ratios=(float(d["ratios"][0]), float(d["ratios"][1])),
            k=int(d["k"]),
            test_ids=set(d["test"]),
            val_ids=set(d["val"]),
            train_ids=set(d["train"]),
            fold_of={i: int(f) for i, f in d["folds"].items()},
        )


def save_manifest(manifest: SplitManifest, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.to_json())
    return path


def load_manifest(path: Path | str) -> SplitManifest:
    path = Path(path)
    if not path.is_file():
        raise CatalogError(f"manifest file not found: {path}")
    try:
        return SplitManifest.from_json(path.read_text())
    except (json.JSONDecodeError, KeyError, ValueError) as e:
        raise CatalogError(f"malformed manifest {path}: {e}") from e


def load_catalog(metadata_path: Path | str, images_root: Path | str) -> list[LesionRecord]:
    """Read a metadata CSV into records, one per image row.

    The file must carry at least the columns lesion_id, image_id and dx;
    other columns are ignored. Image paths are resolved to
    ``images_root/<image_id>.jpg`` without checking existence (images are
    only touched when actually read).
    """
    metadata_path = Path(metadata_path)
    images_root = Path(images_root)
    if not metadata_path.is_file():
        raise CatalogError(f"metadata file not found: {metadata_path}")

    records: list[LesionRecord] = []
    seen: set[str] = set()
    with open(metadata_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise CatalogError(f"{metadata_path}: missing required columns {missing} (found {header})")
        for rownum, row in enumerate(reader, start=2):
            image_id = (row.get("image_id") or "").strip()
            lesion_id = (row.get("lesion_id") or "").strip()
            dx = (row.get("dx") or "").strip()
            if not image_id:
                raise CatalogError(f"{metadata_path}: row {rownum} has an empty image_id")
            if image_id in seen:
                raise CatalogError(f"{metadata_path}: row {rownum} duplicates image_id {image_id!r}")
            if not lesion_id:
                raise CatalogError(f"{metadata_path}: row {rownum} has an empty lesion_id")
            try:
                label = ClassLabel.from_code(dx)
            except ValueError as e:
                raise CatalogError(f"{metadata_path}: row {rownum}: {e}") from None
            seen.add(image_id)
            records.append(
                LesionRecord(
                    image_id=image_id,
                    lesion_id=lesion_id,
                    label=label,
                    image_path=images_root / f"{image_id}.jpg",
                )
            )
    return records


def class_distribution(records: list[LesionRecord], granularity: str = "image") -> ClassDistribution:
    """Count class members per image or per distinct lesion."""
    if granularity not in ("image", "lesion"):
        raise ConfigError(f"granularity must be 'image' or 'lesion', got {granularity!r}")
    counts = {c: 0 for c in ALL_LABELS}
    if granularity == "image":
        for r in records:
            counts[r.label] += 1
    else:
        label_of: dict[str, ClassLabel] = {}
        for r in records:
            prev = label_of.get(r.lesion_id)
            if prev is None:
                label_of[r.lesion_id] = r.label
            elif prev is not r.label:
                raise IntegrityError(
                    f"lesion {r.lesion_id!r} carries conflicting labels {prev.code!r} and {r.label.code!r}"
                )
        for label in label_of.values():
            counts[label] += 1
    return ClassDistribution(counts=counts, total=sum(counts.values()))


def compute_class_weights(
    dist: ClassDistribution,
    scheme: str = "balanced",
    manual: dict[ClassLabel, float] | None = None,
) -> ClassWeights:
    """Per-class loss weights: balanced w_c = total / (K * count_c), or a
    manual override returned verbatim."""
    if scheme == "balanced":
        k = len(dist.counts)
        zero = [c.code for c, n in dist.counts.items() if n == 0]
        if zero:
            raise ConfigError(
                f"balanced weights undefined for empty classes {zero}; use scheme='manual' instead"
            )
        return ClassWeights({c: dist.total / (k * n) for c, n in dist.counts.items()})
    if scheme == "manual":
        if manual is None:
            raise ConfigError("scheme='manual' requires a weight map")
        if set(manual) != set(ALL_LABELS):
            raise ConfigError("manual weights must cover exactly the 7 classes")
        return ClassWeights(dict(manual))
    raise ConfigError(f"unknown weight scheme {scheme!r}")


def uniform_class_weights() -> ClassWeights:
    return ClassWeights({c: 1.0 for c in ALL_LABELS})


def _largest_remainder(n: int, fractions: list[float]) -> list[int]:
    """Split n items into len(fractions) integer parts, one per fraction."""
    exact = [n * f for f in fractions]
    parts = [math.floor(x) for x in exact]
    leftover = n - sum(parts)
    order = sorted(range(len(parts)), key=lambda i: (-(exact[i] - parts[i]), i))
    for i in order[:leftover]:
        parts[i] += 1
    return parts


def _stratified_quotas(sizes: dict[ClassLabel, int], fraction: float) -> dict[ClassLabel, int]:
    """Per-class integer quotas for one subset.

    Two-level largest remainder: the overall subset size is fixed first (so a
    0.2 cut of 7,470 lesions takes exactly 1,494), then distributed over the
    classes by descending fractional remainder. Every class stays within one
    lesion of its exact share.
    """
    total = sum(sizes.values())
    target = _largest_remainder(total, [fraction, 1 - fraction])[0]
    exact = {c: n * fraction for c, n in sizes.items()}
    quotas = {c: math.floor(x) for c, x in exact.items()}
    leftover = target - sum(quotas.values())
    order = sorted(sizes, key=lambda c: (-(exact[c] - quotas[c]), c.index))
    for c in order[:leftover]:
        quotas[c] += 1
    return quotas


def _lesions_by_class(records: list[LesionRecord]) -> dict[ClassLabel, list[str]]:
    # Sort by image_id first so the result is independent of input order;
    # also validates one-label-per-lesion as a side effect.
    class_distribution(records, granularity="lesion")
    by_class: dict[ClassLabel, set[str]] = {c: set() for c in ALL_LABELS}
    for r in sorted(records, key=lambda r: r.image_id):
        by_class[r.label].add(r.lesion_id)
    return {c: sorted(ids) for c, ids in by_class.items()}


def make_split(
    records: list[LesionRecord],
    seed: int,
    test_fraction: float,
    val_fraction: float,
    k: int | None = None,
) -> SplitManifest:
    """Stratified lesion-grouped train/val/test split.

    Per class, lesion ids are shuffled with a PRNG derived from (seed, class)
    and sliced by largest-remainder quotas: first the test pool at
    ``test_fraction`` of the class's lesions, then the val pool at
    ``val_fraction`` of the remainder. All images of a lesion follow it into
    its subset. With ``k`` set, a stratified k-fold assignment over the
    train+val pool is attached.
    """
    if not (0 < test_fraction < 1) or not (0 < val_fraction < 1):
        raise ConfigError(
            f"fractions must lie in (0, 1), got test={test_fraction}, val={val_fraction}"
        )

    by_class = _lesions_by_class(records)
    min_lesions = math.ceil(1 / min(test_fraction, val_fraction))
    test_lesions: set[str] = set()
    val_lesions: set[str] = set()
    train_lesions: set[str] = set()

    splittable: dict[ClassLabel, list[str]] = {}
    for label, lesions in by_class.items():
        n = len(lesions)
        if n == 0:
            continue
        if n == 1:
            warnings.warn(
                f"class {label.code} has a single lesion; placing it in train",
                stacklevel=2,
            )
            train_lesions.update(lesions)
            continue
        if n < min_lesions:
            warnings.warn(
                f"class {label.code} has only {n} lesions; "
                f"{min_lesions} are needed to honour the requested fractions exactly",
                stacklevel=2,
            )
        splittable[label] = lesions

    test_quota = _stratified_quotas({c: len(v) for c, v in splittable.items()}, test_fraction)
    val_quota = _stratified_quotas(
        {c: len(v) - test_quota[c] for c, v in splittable.items()}, val_fraction
    )
    for label, lesions in splittable.items():
        rng = random.Random(f"{seed}:{label.code}:split")
        shuffled = list(lesions)
        rng.shuffle(shuffled)
        n_test, n_val = test_quota[label], val_quota[label]
        test_lesions.update(shuffled[:n_test])
        val_lesions.update(shuffled[n_test : n_test + n_val])
        train_lesions.update(shuffled[n_test + n_val :])

    test_ids = {r.image_id for r in records if r.lesion_id in test_lesions}
    val_ids = {r.image_id for r in records if r.lesion_id in val_lesions}
    train_ids = {r.image_id for r in records if r.lesion_id in train_lesions}

    fold_of: dict[str, int] = {}
    if k is not None:
        pool = [r for r in records if r.lesion_id not in test_lesions]
        fold_of = make_kfold(pool, k=k, seed=seed)

    return SplitManifest(
        seed=seed,
        ratios=(test_fraction, val_fraction),
        k=k or 0,
        test_ids=test_ids,
        val_ids=val_ids,
        train_ids=train_ids,
        fold_of=fold_of,
    )


def make_kfold(records_in_pool: list[LesionRecord], k: int, seed: int) -> dict[str, int]:
    """Stratified lesion-grouped fold assignment over the train+val pool.

    Per class, shuffled lesions are dealt round-robin into k folds, so fold
    sizes differ by at most one lesion per class. Returns image_id -> fold.
    """
    if k < 2:
        raise ConfigError(f"k must be at least 2, got {k}")
    by_class = _lesions_by_class(records_in_pool)
    fold_of_lesion: dict[str, int] = {}
    for label, lesions in by_class.items():
        n = len(lesions)
        if n == 0:
            continue
        if n < k:
            raise ConfigError(
                f"class {label.code} has {n} lesions in the pool, fewer than k={k} folds"
            )
        rng = random.Random(f"{seed}:{label.code}:fold")
        shuffled = list(lesions)
        rng.shuffle(shuffled)
        for i, lesion in enumerate(shuffled):
            fold_of_lesion[lesion] = i % k
    return {r.image_id: fold_of_lesion[r.lesion_id] for r in records_in_pool}


def canonical_ids(records: list[LesionRecord]) -> set[str]:
    """One image per lesion: the lexicographically smallest image_id."""
    best: dict[str, str] = {}
    for r in records:
        cur = best.get(r.lesion_id)
        if cur is None or r.image_id < cur:
            best[r.lesion_id] = r.image_id
    return set(best.values())


def eval_ids(manifest: SplitManifest, records: list[LesionRecord], subset: str) -> list[str]:
    """Image ids to evaluate for a subset: canonical images only, sorted.

    Duplicates of one lesion stay assigned to the subset (the manifest
    partitions every image) but only the canonical image enters metric
    computation, so repeated views of one lesion cannot inflate scores.
    """
    ids = {"test": manifest.test_ids, "val": manifest.val_ids, "train": manifest.train_ids}[subset]
    canon = canonical_ids(records)
    return sorted(ids & canon)


def fold_train_ids(manifest: SplitManifest, fold: int) -> list[str]:
    """All images of pool lesions assigned to folds other than ``fold``."""
    return sorted(i for i, f in manifest.fold_of.items() if f != fold)


def fold_val_ids(manifest: SplitManifest, records: list[LesionRecord], fold: int) -> list[str]:
    """Canonical images of the lesions in ``fold``, used as that fold's val set."""
    canon = canonical_ids(records)
    return sorted(i for i, f in manifest.fold_of.items() if f == fold and i in canon)
