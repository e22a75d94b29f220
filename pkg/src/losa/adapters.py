"""Low-rank adapters, the masked layer reconstruction loss, its gradients,
and an AdamW-style optimiser with global-norm clipping.

For one layer with dense weight W (c_out x c_in), keep-mask M and adapter
(B, A), the loss on inputs X (samples x c_in) is

    L = ||X W^T - X S^T||_F^2 / samples,   S = M * (W + B A)

When ``masked=False`` the adapter sits outside the mask, S = M * W + B A,
which is the plain-LoRA arrangement.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from losa.errors import ShapeError
from losa.linalg import Rng, check_finite, gaussian_fill
from losa.masks import Mask


@dataclass
class Adapter:
    b: np.ndarray  # c_out x r
    a: np.ndarray  # r x c_in

    def __post_init__(self):
        self.b = np.asarray(self.b, dtype=np.float64)
        self.a = np.asarray(self.a, dtype=np.float64)
        if self.b.shape[1] != self.a.shape[0]:
            raise ShapeError(f"adapter factors disagree on rank: B {self.b.shape}, A {self.a.shape}")

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def shape(self):
        return (self.b.shape[0], self.a.shape[1])

    def delta(self) -> np.ndarray:
        return self.b @ self.a


def _check_rank(c_out: int, c_in: int, r: int):
    if not 0 <= r <= min(c_out, c_in):
        raise ShapeError(f"rank {r} not in [0, {min(c_out, c_in)}] for a {c_out}x{c_in} layer")


def init_adapter(c_out: int, c_in: int, r: int, sigma: float, rng: Rng) -> Adapter:
    """A ~ N(0, sigma^2), B = 0, so B A starts at zero."""
    _check_rank(c_out, c_in, r)
    return Adapter(np.zeros((c_out, r)), gaussian_fill(rng, r, c_in, sigma))


def resize(ad: Adapter, new_r: int, sigma: float, rng: Rng) -> Adapter:
    """Grow by appending Gaussian rows to A and zero columns to B; shrink by
    keeping the first ``new_r`` components."""
    c_out, c_in = ad.shape
    _check_rank(c_out, c_in, new_r)
    r = ad.rank
    if new_r <= r:
        return Adapter(ad.b[:, :new_r].copy(), ad.a[:new_r].copy())
    extra = new_r - r
    a = np.vstack([ad.a, gaussian_fill(rng, extra, c_in, sigma)])
    b = np.hstack([ad.b, np.zeros((c_out, extra))])
    return Adapter(b, a)


def _check_shapes(w, mask, ad, x_in):
    if mask.shape != w.shape:
        raise ShapeError(f"mask {mask.shape} does not match weight {w.shape}")
    if ad.shape != w.shape:
        raise ShapeError(f"adapter {ad.shape} does not match weight {w.shape}")
    if x_in.ndim != 2 or x_in.shape[1] != w.shape[1]:
        raise ShapeError(f"inputs {x_in.shape} do not feed a weight of shape {w.shape}")


def effective_weight(w: np.ndarray, mask: Mask, ad: Adapter, masked: bool = True) -> np.ndarray:
    if masked:
        return np.where(mask.bits, w + ad.delta(), 0.0)
    return np.where(mask.bits, w, 0.0) + ad.delta()


def _residual(w, mask, ad, x_in, masked):
    # X W^T - X S^T = X (W - S)^T
    return x_in @ (w - effective_weight(w, mask, ad, masked)).T


def recon_loss(w, mask: Mask, ad: Adapter, x_in, masked: bool = True, normalize: bool = True) -> float:
    _check_shapes(w, mask, ad, x_in)
    r = _residual(w, mask, ad, x_in, masked)
    loss = float(np.sum(r * r))
    if normalize:
        loss /= x_in.shape[0]
    return loss


def recon_grads(w, mask: Mask, ad: Adapter, x_in, masked: bool = True):
    """Analytic (dL/dB, dL/dA) of the normalised loss."""
    _check_shapes(w, mask, ad, x_in)
    r = _residual(w, mask, ad, x_in, masked)
    # dL/dS = -2 R^T X / samples; the leading minus comes from W - S
    g_s = -2.0 * (r.T @ x_in) / x_in.shape[0]
    if masked:
        g_s = np.where(mask.bits, g_s, 0.0)
    return g_s @ ad.a.T, ad.b.T @ g_s


@dataclass
class AdamConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    max_grad_norm: float = 0.3


@dataclass
class OptState:
    m_b: np.ndarray
    v_b: np.ndarray
    m_a: np.ndarray
    v_a: np.ndarray
    step: int = 0
    hp: AdamConfig = field(default_factory=AdamConfig)

    @classmethod
    def zeros_like(cls, ad: Adapter, hp: AdamConfig | None = None) -> "OptState":
        z = np.zeros_like
        return cls(z(ad.b), z(ad.b), z(ad.a), z(ad.a), 0, hp or AdamConfig())

    def resized(self, new_r: int) -> "OptState":
        """Moments follow an adapter resize: dropped components are discarded,
        grown components start from zero."""

        def cols(x):
            r = x.shape[1]
            return x[:, :new_r].copy() if new_r <= r else np.hstack([x, np.zeros((x.shape[0], new_r - r))])

        def rows(x):
            r = x.shape[0]
            return x[:new_r].copy() if new_r <= r else np.vstack([x, np.zeros((new_r - r, x.shape[1]))])

        return replace(self, m_b=cols(self.m_b), v_b=cols(self.v_b), m_a=rows(self.m_a), v_a=rows(self.v_a))


def clip_by_global_norm(grads, max_norm: float):
    norm = float(np.sqrt(sum(np.sum(g * g) for g in grads)))
    if max_norm and max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads], norm
    return list(grads), norm


def linear_lr(base: float, step: int, total: int) -> float:
    """Linear decay from ``base`` at step 0 towards 0 at ``total``."""
    if total <= 0:
        return base
    return base * max(0.0, 1.0 - step / total)


def adam_step(ad: Adapter, opt: OptState, g_b, g_a, lr: float | None = None):
    """One clipped, bias-corrected AdamW update. Returns new (Adapter, OptState)."""
    if g_b.shape != ad.b.shape or g_a.shape != ad.a.shape:
        raise ShapeError("gradient shapes do not match adapter")
    if opt.m_b.shape != ad.b.shape or opt.m_a.shape != ad.a.shape:
        raise ShapeError("optimizer state does not match adapter rank")
    hp = opt.hp
    lr = hp.lr if lr is None else lr
    (g_b, g_a), _ = clip_by_global_norm([g_b, g_a], hp.max_grad_norm)
    t = opt.step + 1
    b1, b2 = hp.beta1, hp.beta2
    m_b = b1 * opt.m_b + (1 - b1) * g_b
    v_b = b2 * opt.v_b + (1 - b2) * g_b * g_b
    m_a = b1 * opt.m_a + (1 - b1) * g_a
    v_a = b2 * opt.v_a + (1 - b2) * g_a * g_a
    c1, c2 = 1 - b1**t, 1 - b2**t

    def update(p, m, v):
        return p - lr * ((m / c1) / (np.sqrt(v / c2) + hp.eps) + hp.weight_decay * p)

    b = check_finite(update(ad.b, m_b, v_b), "adapter B")
    a = check_finite(update(ad.a, m_a, v_a), "adapter A")
    return Adapter(b, a), OptState(m_b, v_b, m_a, v_a, t, hp)
