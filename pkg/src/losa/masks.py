"""Weight scoring and mask generation.

Ties are broken by row-major index: among equal scores the lower index is
treated as less important. With this order, masks at increasing sparsity
for fixed scores are nested.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from losa.errors import ShapeError


@dataclass
class Mask:
    """Boolean keep-matrix. ``sparsity`` is the fraction of zeroed entries."""

    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)

    @property
    def sparsity(self) -> float:
        return float(self.zeros) / self.bits.size if self.bits.size else 0.0

    @property
    def zeros(self) -> int:
        return int(self.bits.size - np.count_nonzero(self.bits))

    @property
    def shape(self):
        return self.bits.shape

    def as_float(self) -> np.ndarray:
        return self.bits.astype(np.float64)

    @classmethod
    def ones(cls, shape) -> "Mask":
        return cls(np.ones(shape, dtype=bool))


def wanda_scores(w_eff: np.ndarray, x: np.ndarray) -> np.ndarray:
    """|W_ij| * ||X[:, j]||_2 with ``x`` shaped samples x c_in."""
    if x.ndim != 2 or x.shape[1] != w_eff.shape[1]:
        raise ShapeError(f"wanda: activations {x.shape} do not match weight {w_eff.shape}")
    col_norms = np.sqrt(np.sum(x * x, axis=0))
    return np.abs(w_eff) * col_norms[None, :]


def magnitude_scores(w_eff: np.ndarray) -> np.ndarray:
    return np.abs(w_eff)


SCORERS = ("wanda", "magnitude")


def score(scorer: str, w_eff: np.ndarray, x: np.ndarray) -> np.ndarray:
    if scorer == "wanda":
        return wanda_scores(w_eff, x)
    if scorer == "magnitude":
        return magnitude_scores(w_eff)
    raise ValueError(f"unknown scorer {scorer!r}; choose from {SCORERS}")


def prune_count(s: float, count: int) -> int:
    # round() is half-to-even
    return int(round(s * count))


def unstructured_mask(scores: np.ndarray, s: float) -> Mask:
    """Zero exactly ``round(s * size)`` entries, lowest scores first."""
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"sparsity must lie in [0, 1], got {s}")
    flat = scores.ravel()
    k = prune_count(s, flat.size)
    bits = np.ones(flat.size, dtype=bool)
    if k:
        bits[np.argsort(flat, kind="stable")[:k]] = False
    return Mask(bits.reshape(scores.shape))


def nm_mask(scores: np.ndarray, n_keep: int, m_group: int) -> Mask:
    """Keep the ``n_keep`` best of every ``m_group`` consecutive inputs in each row.

    A trailing group shorter than ``m_group`` keeps ``ceil(n_keep * len / m_group)``.
    """
    if not (isinstance(n_keep, (int, np.integer)) and isinstance(m_group, (int, np.integer))):
        raise ValueError("n_keep and m_group must be integers")
    if not 1 <= n_keep <= m_group:
        raise ValueError(f"need 1 <= n_keep <= m_group, got {n_keep}:{m_group}")
    rows, cols = scores.shape
    bits = np.ones((rows, cols), dtype=bool)
    for start in range(0, cols, m_group):
        block = scores[:, start : start + m_group]
        width = block.shape[1]
        keep = n_keep if width == m_group else math.ceil(n_keep * width / m_group)
        drop = width - keep
        if drop <= 0:
            continue
        idx = np.argsort(block, axis=1, kind="stable")[:, :drop]
        np.put_along_axis(bits[:, start : start + width], idx, False, axis=1)
    return Mask(bits)
