"""Dense float64 helpers and seeded randomness.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64 in C
(row-major) order. Weights follow the (rows=output, cols=input) convention.

Randomness comes from numpy's Philox4x64-10 counter-based bit generator,
whose stream is fixed by the seed alone and does not depend on platform.
Per-purpose sub-seeds are derived with :func:`derive_seed` so that adding a
new random consumer never shifts an existing stream.
"""

from __future__ import annotations

import hashlib

import numpy as np

from losa.errors import NumericError, ShapeError

Rng = np.random.Generator


def as_matrix(a) -> np.ndarray:
    m = np.array(a, dtype=np.float64, order="C")
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def check_finite(a: np.ndarray, what: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{what} contains non-finite values")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return check_finite(a @ b, "matmul result")


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: shape mismatch {a.shape} vs {b.shape}")
    return check_finite(np.multiply(a, b, dtype=np.float64), "hadamard result")


def frobenius_norm(a: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(a, dtype=np.float64))))


def make_rng(seed: int) -> Rng:
    return np.random.Generator(np.random.Philox(int(seed)))


def derive_seed(seed: int, purpose: str) -> int:
    """Sub-seed = first 8 bytes (little-endian) of sha256("<seed>/<purpose>")."""
    digest = hashlib.sha256(f"{int(seed)}/{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def gaussian_fill(rng: Rng, rows: int, cols: int, sigma: float) -> np.ndarray:
    """i.i.d. N(0, sigma^2) entries. ``sigma == 0`` still consumes the stream."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    z = rng.standard_normal((rows, cols))
    # + 0.0 folds -0.0 into 0.0 so sigma=0 gives a clean zero matrix
    return np.ascontiguousarray(z * float(sigma) + 0.0)
