"""Embedding sequences: the only input currency of the constraint network."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError

LABEL_COHERENT = 0
LABEL_CORRUPTED = 1
LABEL_UNLABELED = 2

_LABELS = (LABEL_COHERENT, LABEL_CORRUPTED, LABEL_UNLABELED)


@dataclass
class EmbeddingSequence:
    """A (positions x dim) matrix from a frozen encoder or the synthetic
    generator, plus identity and label metadata."""

    data: np.ndarray
    id: str = ""
    label: int = LABEL_COHERENT
    pair_id: str = ""
    kind: str = ""

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise DataError(f"embedding sequence must be 2-D (positions, dim), got {arr.shape}")
        if self.label not in _LABELS:
            raise DataError(f"label must be one of {_LABELS}, got {self.label}")
        self.data = arr

    @property
    def positions(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def with_data(self, data: np.ndarray, **meta) -> "EmbeddingSequence":
        return replace(self, data=data, **meta)
