"""Layer importance from cross-layer representation similarity, and
sparsity allocation across layers.

Similarity between two layers is linear normalised HSIC (linear CKA)
computed on samples x features maps, so layers of different widths can be
compared through the shared sample axis.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from losa.errors import InfeasibleError, ShapeError
from losa.model import FeatureMaps


class DegenerateRepresentationWarning(RuntimeWarning):
    """A feature map is constant over samples; its similarity is taken as 0."""


def center_columns(x: np.ndarray) -> np.ndarray:
    return x - x.mean(axis=0, keepdims=True)


def nhsic(xi: np.ndarray, xj: np.ndarray, center: bool = True) -> float:
    """||Xj^T Xi||_F^2 / (||Xi^T Xi||_F ||Xj^T Xj||_F), in [0, 1]."""
    if xi.shape[0] != xj.shape[0]:
        raise ShapeError(f"nhsic: sample counts differ ({xi.shape[0]} vs {xj.shape[0]})")
    if center:
        xi, xj = center_columns(xi), center_columns(xj)
    # rescaling is exact for the ratio and keeps squared norms away from overflow
    si, sj = np.abs(xi).max(initial=0.0), np.abs(xj).max(initial=0.0)
    if si == 0.0 or sj == 0.0:
        warnings.warn("constant feature map; nHSIC set to 0", DegenerateRepresentationWarning, stacklevel=2)
        return 0.0
    xi, xj = xi / si, xj / sj
    cross = np.linalg.norm(xj.T @ xi) ** 2
    denom = np.linalg.norm(xi.T @ xi) * np.linalg.norm(xj.T @ xj)
    if denom == 0.0:
        warnings.warn("degenerate feature map; nHSIC set to 0", DegenerateRepresentationWarning, stacklevel=2)
        return 0.0
    return float(min(max(cross / denom, 0.0), 1.0))


def similarity_matrix(maps: Sequence[np.ndarray], center: bool = True) -> np.ndarray:
    n = len(maps)
    sim = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            sim[i, j] = sim[j, i] = nhsic(maps[i], maps[j], center)
    return sim


def importance(maps: FeatureMaps, use: str = "outputs", center: bool = True) -> np.ndarray:
    """p_i = exp(-sum_{j != i} nHSIC(X_i, X_j)) over the chosen per-layer maps."""
    if use not in ("outputs", "inputs"):
        raise ValueError(f"use must be 'outputs' or 'inputs', got {use!r}")
    reps = maps.outputs if use == "outputs" else maps.inputs
    if len(reps) < 2:
        raise ShapeError("importance needs at least two layers")
    sim = similarity_matrix(reps, center)
    off = sim.sum(axis=1) - np.diag(sim)
    return np.exp(-off)


@dataclass
class SparsityProfile:
    s: np.ndarray
    theta: float
    lo: np.ndarray
    hi: np.ndarray

    def objective(self, p) -> float:
        return float(np.dot(p, self.s))


def default_box(theta: float, n: int, delta: float = 0.1):
    lo = np.full(n, max(0.0, theta - delta))
    hi = np.full(n, min(1.0, theta + delta))
    return lo, hi


def allocate_sparsity(p, theta: float, lo=None, hi=None, delta: float = 0.1) -> SparsityProfile:
    """Minimise p.s subject to mean(s) = theta and lo <= s <= hi.

    Greedy water-filling: start every layer at its lower bound, then pour the
    remaining budget into layers in ascending importance. Layers of equal
    importance share their portion evenly.
    """
    p = np.asarray(p, dtype=np.float64)
    n = p.size
    if lo is None or hi is None:
        dlo, dhi = default_box(theta, n, delta)
        lo = dlo if lo is None else lo
        hi = dhi if hi is None else hi
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), (n,)).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), (n,)).copy()
    if np.any(lo < 0) or np.any(hi > 1) or np.any(lo > hi):
        raise ValueError("box bounds must satisfy 0 <= lo <= hi <= 1")
    budget = n * theta
    if budget < lo.sum() - 1e-12 or budget > hi.sum() + 1e-12:
        raise InfeasibleError(
            f"mean sparsity {theta} is outside the feasible range "
            f"[{lo.mean():.6g}, {hi.mean():.6g}] of the layer bounds",
            feasible=(float(lo.mean()), float(hi.mean())),
        )

    s = lo.copy()
    surplus = budget - lo.sum()
    for value in np.unique(p):
        if surplus <= 0:
            break
        group = np.flatnonzero(p == value)
        room = hi[group] - s[group]
        if room.sum() <= surplus:
            s[group] = hi[group]
            surplus -= room.sum()
            continue
        s[group] += _even_fill(room, surplus)
        surplus = 0.0
    return SparsityProfile(s, float(theta), lo, hi)


def _even_fill(room: np.ndarray, amount: float) -> np.ndarray:
    """Split ``amount`` evenly over slots with capacities ``room``."""
    add = np.zeros_like(room)
    active = np.ones(room.size, dtype=bool)
    while amount > 1e-15 and active.any():
        share = amount / active.sum()
        capped = active & (room - add <= share)
        if not capped.any():
            add[active] += share
            break
        amount -= (room - add)[capped].sum()
        add[capped] = room[capped]
        active &= ~capped
    return add


def allocate_nm(p, mean_sparsity: float, m_group: int, max_shift: Optional[int] = 1) -> list:
    """Integer N per layer for mixed N:M sparsity with mean sparsity ``mean_sparsity``.

    Every layer starts at N0 = round(M * (1 - mean)) and may move at most
    ``max_shift`` steps away from it (``None`` allows the full range
    1..M). The kept-weight budget goes to the most important layers first,
    so more important layers keep at least as many weights.
    """
    p = np.asarray(p, dtype=np.float64)
    n = p.size
    if not 0.0 <= mean_sparsity <= 1.0:
        raise ValueError(f"mean sparsity must lie in [0, 1], got {mean_sparsity}")
    total = int(round(n * m_group * (1.0 - mean_sparsity)))
    base = int(round(m_group * (1.0 - mean_sparsity)))
    if max_shift is None:
        lo, hi = 1, m_group
    else:
        lo, hi = max(1, base - max_shift), min(m_group, base + max_shift)
    achieved = 1.0 - total / (n * m_group)
    if not (n * lo <= total <= n * hi) or abs(achieved - mean_sparsity) > 1.0 / (n * m_group):
        raise InfeasibleError(
            f"mean sparsity {mean_sparsity} is not reachable with N in [{lo}, {hi}] of {m_group}",
            feasible=(1.0 - hi / m_group, 1.0 - lo / m_group),
        )
    keep = np.full(n, lo, dtype=int)
    surplus = total - n * lo
    for value in np.unique(p)[::-1]:
        if surplus == 0:
            break
        group = np.flatnonzero(p == value)
        # round-robin in index order inside a tie group
        while surplus and np.any(keep[group] < hi):
            for g in group:
                if surplus and keep[g] < hi:
                    keep[g] += 1
                    surplus -= 1
    return [int(k) for k in keep]
