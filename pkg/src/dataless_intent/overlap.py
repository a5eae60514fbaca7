"""Entity-overlap matrix and the top-k overlap gate."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .exceptions import InvalidInputError

__all__ = ["OverlapMatrix", "build_overlap_matrix", "top_k_classes", "overlaps"]

DEFAULT_K = 3


@dataclass(frozen=True, eq=False)
class OverlapMatrix:
    labels: tuple[str, ...]
    bits: np.ndarray

    @property
    def size(self) -> int:
        return len(self.labels)

    def __getitem__(self, ij) -> bool:
        return bool(self.bits[ij])

    def __eq__(self, other):
        return (isinstance(other, OverlapMatrix) and self.labels == other.labels
                and np.array_equal(self.bits, other.bits))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([""] + list(self.labels))
            for label, row in zip(self.labels, self.bits):
                w.writerow([label] + [int(b) for b in row])


def build_overlap_matrix(schema) -> OverlapMatrix:
    """``bits[i, j]`` is true iff classes i and j share an entity string."""
    ents = [cls.entities for cls in schema]
    n = len(ents)
    bits = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(i, n):
            bits[i, j] = bits[j, i] = bool(ents[i] & ents[j])
    bits.setflags(write=False)
    return OverlapMatrix(tuple(cls.label for cls in schema), bits)


def top_k_classes(sims, k: int) -> list[int]:
    """Positions of the k best scores, descending; ties go to the lower position."""
    s = np.asarray(sims, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise InvalidInputError("similarity vector must be non-empty and 1-D")
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    order = np.argsort(-s, kind="stable")
    return [int(i) for i in order[:k]]


def overlaps(sims, k: int, matrix: OverlapMatrix) -> bool:
    """True iff any two distinct classes among the top k share an entity."""
    if len(sims) != matrix.size:
        raise InvalidInputError(f"similarity vector has {len(sims)} entries, matrix {matrix.size}")
    top = top_k_classes(sims, k)
    return any(matrix.bits[m, n] for m, n in combinations(top, 2))
