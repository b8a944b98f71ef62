"""Image file access keyed by image_id, with errors that name the image."""

from __future__ import annotations

import numpy as np
from PIL import Image, UnidentifiedImageError

from .catalog import LesionRecord
from .errors import DataError


def load_image(path) -> np.ndarray:
    """Read an image file as HxWx3 float32 in [0, 1], RGB."""
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            return np.asarray(rgb, dtype=np.float32) / 255.0
    except (FileNotFoundError, UnidentifiedImageError, OSError) as e:
        raise DataError(f"unreadable image {path}: {e}") from e


class ImageStore:
    """Catalog-backed loader: image_id -> pixels / label / record."""

    def __init__(self, records: list[LesionRecord]):
        self.by_id = {r.image_id: r for r in records}

    def record(self, image_id: str) -> LesionRecord:
        try:
            return self.by_id[image_id]
        except KeyError:
            raise DataError(f"image_id {image_id!r} is not in the catalog") from None

    def load(self, image_id: str) -> np.ndarray:
        r = self.record(image_id)
        try:
            return load_image(r.image_path)
        except DataError as e:
            raise DataError(f"image {image_id!r}: {e}") from e

    def label_index(self, image_id: str) -> int:
        return self.record(image_id).label.index
