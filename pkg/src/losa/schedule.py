"""Progressive sparsity schedules, the per-step rank budget, and
reconstruction-error-proportional rank allocation."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


def _check_step(t: int, T: int):
    if T < 1 or not 1 <= t <= T:
        raise ValueError(f"step t={t} outside 1..{T}")


def cubic_theta(t: int, T: int, theta_f: float) -> float:
    """theta_f - theta_f * (1 - t/T)^3"""
    _check_step(t, T)
    return theta_f - theta_f * (1.0 - t / T) ** 3


def linear_theta(t: int, T: int, theta_f: float) -> float:
    _check_step(t, T)
    return theta_f - theta_f * (1.0 - t / T)


SCHEDULES = {"cubic": cubic_theta, "linear": linear_theta}


def theta_at(kind: str, t: int, T: int, theta_f: float) -> float:
    try:
        fn = SCHEDULES[kind]
    except KeyError:
        raise ValueError(f"unknown schedule {kind!r}; choose from {sorted(SCHEDULES)}") from None
    return fn(t, T, theta_f)


def rank_budget(t: int, omega_1: float) -> float:
    """Mean rank at step t when it grows by one per step from ``omega_1``."""
    if t < 1:
        raise ValueError(f"step t={t} must be >= 1")
    return omega_1 + (t - 1)


class DegenerateLossWarning(RuntimeWarning):
    """All layer losses are zero; ranks fall back to the uniform budget."""


@dataclass
class RankProfile:
    r: list
    omega: float
    degenerate: bool = False

    @property
    def mean(self) -> float:
        return float(np.mean(self.r)) if self.r else 0.0


def allocate_ranks(losses: Sequence[float], omega: float, caps: Optional[Sequence[int]] = None) -> RankProfile:
    """r_i = round(L_i / mean(L) * omega), half-to-even, then capped.

    No renormalisation follows the rounding or the caps.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if np.any(losses < 0) or not np.all(np.isfinite(losses)):
        raise ValueError("losses must be finite and non-negative")
    avg = losses.mean()
    if avg == 0.0:
        warnings.warn("all losses are zero; using uniform ranks", DegenerateLossWarning, stacklevel=2)
        raw = np.full(losses.size, float(omega))
        degenerate = True
    else:
        raw = losses / avg * omega
        degenerate = False
    r = np.rint(raw).astype(int)
    if caps is not None:
        r = np.minimum(r, np.asarray(caps, dtype=int))
    return RankProfile([int(v) for v in r], float(omega), degenerate)
