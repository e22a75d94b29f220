"""The progressive sparsify-and-adapt loop, its baselines, merging and
evaluation.

Per step t of ``run_losa``:

1. target mean sparsity from the schedule
2. feature maps of the current effective model M * (W + B A)
3. cross-layer nHSIC -> layer importance
4. per-layer sparsity from the importance-weighted allocation
5. fresh masks scored on W + B A
6. mean-rank budget for this step
7. per-layer reconstruction losses under the new masks
8. loss-proportional ranks; adapters resized
9. ``train.epochs`` full-batch AdamW updates per layer

Reconstruction always uses inputs captured once from the dense model, so
every layer is trained against the same teacher activations.
"""

from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from losa.adapters import (
    Adapter,
    OptState,
    adam_step,
    effective_weight,
    init_adapter,
    linear_lr,
    recon_grads,
    recon_loss,
    resize,
)
from losa.config import RunConfig
from losa.errors import LosaError, NumericError, ShapeError
from losa.linalg import derive_seed, make_rng
from losa.masks import Mask, nm_mask, score, unstructured_mask
from losa.model import CalibBatch, LayerStack, capture_weights, forward, forward_capture
from losa.rmi import allocate_nm, allocate_sparsity, importance
from losa.schedule import allocate_ranks, rank_budget, theta_at


@dataclass
class StepReport:
    t: int
    theta: float
    s: list
    p: list
    r: list
    loss_before: list
    loss_after: list
    omega: float = 0.0
    s_realized: list = field(default_factory=list)
    non_descent: list = field(default_factory=list)
    wall_clock: float = 0.0

    def to_dict(self, timing: bool = False) -> dict:
        d = {
            "t": self.t,
            "theta": self.theta,
            "mean_s": float(np.mean(self.s)),
            "s": self.s,
            "s_realized": self.s_realized,
            "p": self.p,
            "r": self.r,
            "omega": self.omega,
            "loss_before": self.loss_before,
            "loss_after": self.loss_after,
            "non_descent": self.non_descent,
        }
        if timing:
            d["wall_clock"] = self.wall_clock
        return d


@dataclass
class SparseModel:
    """Final weights plus the masks and adapters they came from.

    ``mergeable`` is False when dense adapters break the zero pattern
    (plain LoRA); ``weights`` are then M * W + B A.
    """

    weights: list
    masks: list
    ranks: list
    activation: str = "relu"
    mergeable: bool = True
    adapters: Optional[list] = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        return forward(self.weights, x, self.activation)

    def realized_sparsity(self) -> list:
        return [m.sparsity for m in self.masks]

    def zero_pattern_ok(self) -> bool:
        return all(bool(np.all(w[~m.bits] == 0.0)) for w, m in zip(self.weights, self.masks))

    def as_stack(self, names=None) -> LayerStack:
        return LayerStack([w.copy() for w in self.weights], list(names or []))


def merge(stack: LayerStack, masks, adapters, activation: str = "relu") -> SparseModel:
    """W' = M * (W + B A) per layer."""
    if len(masks) != len(stack) or len(adapters) != len(stack):
        raise ShapeError("need one mask and one adapter per layer")
    weights = [effective_weight(w, m, ad) for w, m, ad in zip(stack.weights, masks, adapters)]
    return SparseModel(weights, list(masks), [ad.rank for ad in adapters], activation, adapters=list(adapters))


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(*it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda it: fn(*it), items))


def _train_layer(w, mask, ad, opt, x, epochs, k0, total, masked):
    for e in range(epochs):
        if ad.rank == 0:
            break
        g_b, g_a = recon_grads(w, mask, ad, x, masked)
        ad, opt = adam_step(ad, opt, g_b, g_a, linear_lr(opt.hp.lr, k0 + e, total))
    return ad, opt


def _losses(stack, masks, adapters, teacher, masked=True):
    out = []
    for i, (w, m, ad, x) in enumerate(zip(stack.weights, masks, adapters, teacher)):
        loss = recon_loss(w, m, ad, x, masked)
        if not np.isfinite(loss):
            raise NumericError(f"layer {i}: non-finite reconstruction loss (adapter rank {ad.rank})")
        out.append(loss)
    return out


def _non_descent(before, after, rtol=1e-12):
    return [i for i, (b, a) in enumerate(zip(before, after)) if a > b * (1 + rtol) + 1e-300]


def _adapter_rngs(seed: int, n: int):
    return [make_rng(derive_seed(seed, f"adapter.layer{i}")) for i in range(n)]


def _with_context(exc: LosaError, where: str) -> LosaError:
    new = exc.__class__.__new__(exc.__class__)
    Exception.__init__(new, f"{where}: {exc}")
    new.__dict__.update(exc.__dict__)
    return new


def run_losa(cfg: RunConfig, stack: LayerStack, calib: CalibBatch, threads: int = 1):
    """Progressive sparsification with sparsity-aware adapters.

    Returns the merged :class:`SparseModel` and one :class:`StepReport` per step.
    """
    sc, hp = cfg.schedule, cfg.optim
    act = cfg.model.activation
    n = len(stack)
    teacher = forward_capture(stack, calib, act).inputs
    caps = stack.rank_caps()
    rngs = _adapter_rngs(cfg.seed, n)
    adapters = [init_adapter(w.shape[0], w.shape[1], 0, cfg.train.init_sigma, rng) for w, rng in zip(stack.weights, rngs)]
    opts = [OptState.zeros_like(ad, hp) for ad in adapters]
    masks = [Mask.ones(w.shape) for w in stack.weights]
    total_updates = sc.T * cfg.train.epochs
    reports = []

    for t in range(1, sc.T + 1):
        tic = time.perf_counter()
        try:
            theta = theta_at(sc.kind, t, sc.T, sc.theta_f)
            eff = [effective_weight(w, m, ad) for w, m, ad in zip(stack.weights, masks, adapters)]
            maps = capture_weights(eff, calib.inputs, act)
            p = importance(maps, cfg.rmi.maps, cfg.rmi.center)

            dense_eff = [w + ad.delta() for w, ad in zip(stack.weights, adapters)]
            scores = [score(cfg.mask.scorer, we, x) for we, x in zip(dense_eff, teacher)]
            if cfg.mode == "nm_losa":
                keep = allocate_nm(p, theta, cfg.nm.m_group, cfg.nm.max_shift)
                masks = [nm_mask(sc_i, k, cfg.nm.m_group) for sc_i, k in zip(scores, keep)]
                target = [1.0 - k / cfg.nm.m_group for k in keep]
            else:
                prof = allocate_sparsity(p, theta, delta=cfg.sparsity.delta)
                masks = [unstructured_mask(sc_i, s_i) for sc_i, s_i in zip(scores, prof.s)]
                target = [float(v) for v in prof.s]

            omega = rank_budget(t, sc.omega_1)
            pre = _losses(stack, masks, adapters, teacher)
            ranks = allocate_ranks(pre, omega, caps).r
            adapters = [resize(ad, r, cfg.train.init_sigma, rng) for ad, r, rng in zip(adapters, ranks, rngs)]
            opts = [opt.resized(r) for opt, r in zip(opts, ranks)]
            before = _losses(stack, masks, adapters, teacher)

            k0 = (t - 1) * cfg.train.epochs
            jobs = [
                (w, m, ad, opt, x, cfg.train.epochs, k0, total_updates, True)
                for w, m, ad, opt, x in zip(stack.weights, masks, adapters, opts, teacher)
            ]
            adapters, opts = map(list, zip(*_map(_train_layer, jobs, threads)))
            after = _losses(stack, masks, adapters, teacher)
        except LosaError as exc:
            raise _with_context(exc, f"step {t}") from exc

        reports.append(
            StepReport(
                t=t,
                theta=float(theta),
                s=target,
                s_realized=[m.sparsity for m in masks],
                p=[float(v) for v in p],
                r=[ad.rank for ad in adapters],
                loss_before=before,
                loss_after=after,
                omega=float(omega),
                non_descent=_non_descent(before, after),
                wall_clock=time.perf_counter() - tic,
            )
        )

    return merge(stack, masks, adapters, act), reports


def _uniform_masks(cfg, stack, teacher, rate):
    return [unstructured_mask(score(cfg.mask.scorer, w, x), rate) for w, x in zip(stack.weights, teacher)]


def run_oneshot(cfg: RunConfig, stack: LayerStack, calib: CalibBatch, threads: int = 1):
    """Uniform-rate masks at the final sparsity on the dense weights, no fine-tuning."""
    tic = time.perf_counter()
    act = cfg.model.activation
    teacher = forward_capture(stack, calib, act).inputs
    masks = _uniform_masks(cfg, stack, teacher, cfg.schedule.theta_f)
    empty = [Adapter(np.zeros((w.shape[0], 0)), np.zeros((0, w.shape[1]))) for w in stack.weights]
    losses = _losses(stack, masks, empty, teacher)
    model = merge(stack, masks, empty, act)
    report = StepReport(
        t=1,
        theta=cfg.schedule.theta_f,
        s=[cfg.schedule.theta_f] * len(stack),
        s_realized=[m.sparsity for m in masks],
        p=[],
        r=[0] * len(stack),
        loss_before=losses,
        loss_after=losses,
        wall_clock=time.perf_counter() - tic,
    )
    return model, [report]


def run_lora_baseline(cfg: RunConfig, stack: LayerStack, calib: CalibBatch, threads: int = 1):
    """Uniform one-shot masks on W, then a fixed-rank dense adapter trained
    for the same number of updates as ``run_losa``.

    The adapter is not masked, so the result is flagged unmergeable: its
    ``weights`` are M * W + B A and are dense.
    """
    sc, hp = cfg.schedule, cfg.optim
    act = cfg.model.activation
    teacher = forward_capture(stack, calib, act).inputs
    masks = _uniform_masks(cfg, stack, teacher, sc.theta_f)
    rngs = _adapter_rngs(cfg.seed, len(stack))
    adapters = []
    for w, rng in zip(stack.weights, rngs):
        r = min(cfg.lora.rank, *w.shape)
        adapters.append(init_adapter(w.shape[0], w.shape[1], r, cfg.train.init_sigma, rng))
    opts = [OptState.zeros_like(ad, hp) for ad in adapters]
    total_updates = sc.T * cfg.train.epochs
    reports = []
    for t in range(1, sc.T + 1):
        tic = time.perf_counter()
        try:
            before = _losses(stack, masks, adapters, teacher, masked=False)
            k0 = (t - 1) * cfg.train.epochs
            jobs = [
                (w, m, ad, opt, x, cfg.train.epochs, k0, total_updates, False)
                for w, m, ad, opt, x in zip(stack.weights, masks, adapters, opts, teacher)
            ]
            adapters, opts = map(list, zip(*_map(_train_layer, jobs, threads)))
            after = _losses(stack, masks, adapters, teacher, masked=False)
        except LosaError as exc:
            raise _with_context(exc, f"step {t}") from exc
        reports.append(
            StepReport(
                t=t,
                theta=sc.theta_f,
                s=[sc.theta_f] * len(stack),
                s_realized=[m.sparsity for m in masks],
                p=[],
                r=[ad.rank for ad in adapters],
                loss_before=before,
                loss_after=after,
                non_descent=_non_descent(before, after),
                wall_clock=time.perf_counter() - tic,
            )
        )
    weights = [effective_weight(w, m, ad, masked=False) for w, m, ad in zip(stack.weights, masks, adapters)]
    model = SparseModel(weights, masks, [ad.rank for ad in adapters], act, mergeable=False, adapters=adapters)
    return model, reports


def remasked(stack: LayerStack, model: SparseModel) -> SparseModel:
    """Force an unmergeable model back onto its masks: M * (W + B A)."""
    return merge(stack, model.masks, model.adapters, model.activation)


RUNNERS = {
    "losa": run_losa,
    "nm_losa": run_losa,
    "lora_baseline": run_lora_baseline,
    "oneshot": run_oneshot,
}


def run(cfg: RunConfig, stack: LayerStack, calib: CalibBatch, threads: int = 1):
    return RUNNERS[cfg.mode](cfg, stack, calib, threads)


def layer_errors(dense: LayerStack, weights, data: CalibBatch, activation: str = "relu") -> list:
    """||X_i W_i^T - X_i W'_i^T||_F^2 / samples with dense-model inputs X_i."""
    teacher = forward_capture(dense, data, activation).inputs
    out = []
    for w, w2, x in zip(dense.weights, weights, teacher):
        r = x @ (w - w2).T
        out.append(float(np.sum(r * r)) / x.shape[0])
    return out


def evaluate(dense: LayerStack, sparse: SparseModel, data: CalibBatch) -> dict:
    if len(sparse.weights) != len(dense):
        raise ShapeError("dense and sparse models differ in depth")
    for w, w2 in zip(dense.weights, sparse.weights):
        if w.shape != w2.shape:
            raise ShapeError(f"weight shapes differ: {w.shape} vs {w2.shape}")
    act = sparse.activation
    errs = layer_errors(dense, sparse.weights, data, act)
    diff = forward(dense.weights, data.inputs, act) - sparse.forward(data.inputs)
    counts = [m.bits.size for m in sparse.masks]
    zeros = [m.zeros for m in sparse.masks]
    return {
        "layer_recon": errs,
        "total_recon": float(sum(errs)),
        "output_mse": float(np.mean(diff * diff)),
        "realized_sparsity": sparse.realized_sparsity(),
        "mean_sparsity": float(np.mean(sparse.realized_sparsity())),
        "overall_sparsity": float(sum(zeros) / sum(counts)),
        "ranks": list(sparse.ranks),
        "mean_rank": float(np.mean(sparse.ranks)) if sparse.ranks else 0.0,
        "mergeable": sparse.mergeable,
        "zero_pattern_ok": sparse.zero_pattern_ok(),
    }


KEYS = ("s", "s_realized", "p", "r", "loss_before", "loss_after")


def steps_csv(reports) -> str:
    n = max((len(r.s) for r in reports), default=0)
    cols = ["t", "theta", "omega"]
    for key in KEYS:
        cols += [f"{key}_{i}" for i in range(n)]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for rep in reports:
        row = [rep.t, repr(rep.theta), repr(rep.omega)]
        for key in KEYS:
            vals = getattr(rep, key)
            row += [repr(v) for v in vals] + [""] * (n - len(vals))
        writer.writerow(row)
    return buf.getvalue()


def curve_csv(reports) -> str:
    """One row per step: the error-vs-step curve."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["t", "theta", "mean_s", "mean_s_realized", "mean_r", "total_loss_before", "total_loss_after"])
    for rep in reports:
        writer.writerow(
            [
                rep.t,
                repr(rep.theta),
                repr(float(np.mean(rep.s))),
                repr(float(np.mean(rep.s_realized))),
                repr(float(np.mean(rep.r))),
                repr(float(sum(rep.loss_before))),
                repr(float(sum(rep.loss_after))),
            ]
        )
    return buf.getvalue()


def report_json(cfg: RunConfig, reports, evaluation: dict, extra: Optional[dict] = None) -> str:
    doc = {
        "mode": cfg.mode,
        "config": cfg.to_flat(),
        "steps": [r.to_dict() for r in reports],
        "final": evaluation,
    }
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
