"""Parameter records and result type shared by the solvers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidParameterError


@dataclass
class PatchConfig:
    """Patch-tensor layout.

    ``t_s_block`` and ``overlap_discard`` count slow frames.
    """

    patch_dims: tuple = (8, 8)
    t_s_block: int = 33
    overlap_discard: int = 2
    cycle_spin: bool = True
    seed: int = 0

    def __post_init__(self):
        self.patch_dims = tuple(int(p) for p in self.patch_dims)
        if any(p < 1 for p in self.patch_dims):
            raise InvalidParameterError("patch dimensions must be positive")
        if self.t_s_block < 1:
            raise InvalidParameterError("t_s_block must be positive")
        if not 0 <= 2 * self.overlap_discard < self.t_s_block:
            raise InvalidParameterError("overlap_discard must be below half the block length")


@dataclass
class AdmmParams:
    """ADMM settings; the lambdas multiply the per-mode nuclear norms."""

    lambdas: tuple = (1.0, 1.0, 2.0)
    lambda_scale: float = 0.2
    rho: float = 121.0
    r: float = 3.0
    outer_S: int = 2
    inner_T: int = 11
    cg_iters: int = 4

    def __post_init__(self):
        self.lambdas = tuple(float(v) for v in self.lambdas)
        if len(self.lambdas) != 3 or any(v < 0 for v in self.lambdas):
            raise InvalidParameterError("lambdas must be three non-negative numbers")
        if not self.rho > 0:
            raise InvalidParameterError("rho must be positive")
        if self.r < 1:
            raise InvalidParameterError("r must be at least 1")
        if min(self.outer_S, self.inner_T, self.cg_iters) < 1:
            raise InvalidParameterError("iteration counts must be at least 1")

    @property
    def effective_lambdas(self):
        return tuple(self.lambda_scale * v for v in self.lambdas)


@dataclass
class ManifoldParams:
    beta: float | None = None        # None: pick from the condition-number target
    outer_iters: int = 4
    cg_iters: int = 2
    kappa: float = 15.0

    def __post_init__(self):
        if self.beta is not None and self.beta < 0:
            raise InvalidParameterError("beta must be non-negative")
        if self.outer_iters < 1 or self.cg_iters < 0:
            raise InvalidParameterError("invalid iteration counts")
        if not self.kappa > 1:
            raise InvalidParameterError("kappa must exceed 1")


@dataclass
class ReconResult:
    images: np.ndarray
    param_maps: dict | None = None
    objective_trace: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    components: dict = field(default_factory=dict)
