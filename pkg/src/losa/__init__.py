"""Dynamic low-rank sparse adaptation for stacks of linear layers."""

from losa.adapters import Adapter, OptState, adam_step, init_adapter, recon_grads, recon_loss, resize
from losa.driver import RunConfig, SparseModel, StepReport, evaluate, merge, run_lora_baseline, run_losa, run_oneshot
from losa.masks import Mask, magnitude_scores, nm_mask, unstructured_mask, wanda_scores
from losa.model import CalibBatch, FeatureMaps, LayerStack, forward_capture, load_checkpoint, make_synthetic, save_checkpoint
from losa.rmi import allocate_nm, allocate_sparsity, importance, nhsic
from losa.schedule import allocate_ranks, cubic_theta, linear_theta, rank_budget

__version__ = "0.1.0"

__all__ = [
    "Adapter",
    "CalibBatch",
    "FeatureMaps",
    "LayerStack",
    "Mask",
    "OptState",
    "RunConfig",
    "SparseModel",
    "StepReport",
    "adam_step",
    "allocate_nm",
    "allocate_ranks",
    "allocate_sparsity",
    "cubic_theta",
    "evaluate",
    "forward_capture",
    "importance",
    "init_adapter",
    "linear_theta",
    "load_checkpoint",
    "magnitude_scores",
    "make_synthetic",
    "merge",
    "nhsic",
    "nm_mask",
    "rank_budget",
    "recon_grads",
    "recon_loss",
    "resize",
    "run_lora_baseline",
    "run_losa",
    "run_oneshot",
    "save_checkpoint",
    "unstructured_mask",
    "wanda_scores",
]
