"""The seven lesion classes and their fixed index order."""

from __future__ import annotations

import enum


class ClassLabel(enum.Enum):
    """Lesion diagnosis codes, indexed alphabetically (akiec=0 .. vasc=6)."""

    AKIEC = "akiec"
    BCC = "bcc"
    BKL = "bkl"
    DF = "df"
    MEL = "mel"
    NV = "nv"
    VASC = "vasc"

    @property
    def code(self) -> str:
        return self.value

    @property
    def index(self) -> int:
        return _INDEX[self]

    @classmethod
    def from_code(cls, code: str) -> "ClassLabel":
        try:
            return cls(code.strip().lower())
        except ValueError:
            raise ValueError(f"unknown class code {code!r}; expected one of {[c.value for c in cls]}") from None

    @classmethod
    def from_index(cls, index: int) -> "ClassLabel":
        return _ORDERED[index]


_ORDERED = sorted(ClassLabel, key=lambda c: c.value)
_INDEX = {label: i for i, label in enumerate(_ORDERED)}

NUM_CLASSES = len(_ORDERED)

ALL_LABELS: tuple[ClassLabel, ...] = tuple(_ORDERED)
