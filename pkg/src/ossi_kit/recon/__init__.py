"""Reconstruction solvers for OSSI image series."""

from .admm import VARIANTS, admm_tensor_lr, patch_lr_plus_sparse
from .blocks import TimeBlock, time_block_scheduler
from .cg import batched_cg, cg_sense, data_shared_init, finite_diff, finite_diff_adjoint, zero_filled
from .common import AdmmParams, ManifoldParams, PatchConfig, ReconResult
from .manifold import default_beta, manifold_targets, ossimm
from .pgm import auto_alpha, lowrank_pgm
from .tensor import PatchGrid, nuclear_norm, refold, svt, unfold

__all__ = [
    "AdmmParams", "ManifoldParams", "PatchConfig", "ReconResult", "TimeBlock", "PatchGrid",
    "VARIANTS", "admm_tensor_lr", "patch_lr_plus_sparse", "time_block_scheduler", "batched_cg",
    "cg_sense", "data_shared_init", "zero_filled", "finite_diff", "finite_diff_adjoint",
    "default_beta", "manifold_targets", "ossimm", "auto_alpha", "lowrank_pgm", "nuclear_norm",
    "refold", "svt", "unfold",
]
