"""OSSIMM: near-manifold regularized reconstruction with joint quantification.

Alternates a voxel-wise dictionary match of the current images, which
gives targets ``m0 * phi(theta)``, with a few CG steps on

    0.5 * ||A X - y||^2 + beta * ||X - m0 phi||^2 .

The cost is separable over slow frames, so all frames are solved at once
with frame-wise CG recursions.
"""

from __future__ import annotations

import numpy as np

from ..dictionary import Dictionary, match_voxels
from ..encoding import EncodingOp, operator_norm
from ..errors import DimensionMismatchError, InvalidParameterError
from .cg import batched_cg, data_shared_init
from .common import ManifoldParams, ReconResult

__all__ = ["ossimm", "default_beta", "manifold_targets"]


def default_beta(op: EncodingOp, kappa: float = 15.0, sigma_max: float | None = None) -> float:
    """Weight giving the quadratic subproblem a condition number of ``kappa``.

    With undersampling the smallest eigenvalue of ``A'A`` is zero, so the
    condition number of ``A'A + 2 beta I`` is ``(s_max**2 + 2 beta) / (2 beta)``.
    """
    if sigma_max is None:
        sigma_max = operator_norm(op, iters=30)
    return float(sigma_max ** 2 / (2.0 * (kappa - 1.0)))


def manifold_targets(X, d: Dictionary, mask, method: str = "bnb"):
    """Match every masked voxel of every frame; zero target elsewhere.

    Returns ``(targets, maps)`` where ``maps`` holds per-frame arrays
    ``(nx, ny, t_s)`` of m0, f0, r2s, t2p, t2, residual and degeneracy.
    """
    nx, ny, nc, ts = X.shape
    V = np.moveaxis(X, 2, 3)[mask]                 # (n_vox, t_s, n_c)
    flat = V.reshape(-1, nc)
    idx, m0, res, deg = match_voxels(flat, d, method)
    T = np.zeros((nx, ny, ts, nc), complex)
    T[mask] = (m0[:, None] * d.atoms[:, idx].T).reshape(V.shape)
    maps = {}
    for name, vals, dtype in (("m0", m0, complex), ("f0", d.f0[idx], float),
                              ("r2s", d.r2s[idx], float), ("t2p", d.t2p[idx], float),
                              ("t2", d.t2[idx], float), ("residual", res, float),
                              ("degenerate", deg, bool)):
        arr = np.zeros((nx, ny, ts), dtype)
        arr[mask] = vals.reshape(V.shape[:2])
        maps[name] = arr
    return np.moveaxis(T, 3, 2), maps


def ossimm(y, op: EncodingOp, d: Dictionary, mp: ManifoldParams | None = None, x0=None,
           mask=None, init_window: int = 10, method: str = "bnb") -> ReconResult:
    """Alternating dictionary matching and regularized least squares.

    Parameters
    ----------
    y : ndarray
        k-space matching ``op``; every slow frame holds one fast-time set.
    op : EncodingOp
    d : Dictionary
        Built for the same sequence and sample time as the data.
    mp : ManifoldParams, optional
        ``beta=None`` uses :func:`default_beta` with ``mp.kappa``.
    x0 : ndarray, optional
        Initial images; data-shared initialization by default.
    mask : ndarray of bool, optional
        Voxels that are matched; elsewhere the target is zero.  Defaults to
        voxels whose fast-time-combined initial magnitude, averaged over
        slow time, exceeds 10% of its maximum.

    Returns
    -------
    ReconResult
        ``param_maps`` comes from a final match of the returned images.
    """
    mp = mp or ManifoldParams()
    if d.n_atoms == 0:
        raise InvalidParameterError("dictionary is empty")
    y = np.asarray(y)
    if y.shape != op.data_shape:
        raise DimensionMismatchError(f"data {y.shape} vs operator {op.data_shape}")
    if d.atoms.shape[0] != op.n_c:
        raise DimensionMismatchError(f"dictionary n_c={d.atoms.shape[0]} vs data n_c={op.n_c}")
    X = data_shared_init(y, op, min(init_window, op.t_s)) if x0 is None \
        else np.array(x0, dtype=complex)
    if X.shape != op.image_shape:
        raise DimensionMismatchError(f"initial image {X.shape} vs {op.image_shape}")
    if mask is None:
        mag = np.sqrt(np.sum(np.abs(X) ** 2, axis=2)).mean(axis=-1)
        mask = mag > 0.1 * mag.max() if mag.max() > 0 else np.ones(mag.shape, bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != op.image_shape[:2]:
        raise DimensionMismatchError(f"mask {mask.shape} vs image {op.image_shape[:2]}")
    beta = default_beta(op, mp.kappa) if mp.beta is None else float(mp.beta)
    Aty = op.adjoint(y)
    yy = float(np.vdot(y, y).real)
    trace, cg_res = [], []
    for _ in range(mp.outer_iters):
        T, maps = manifold_targets(X, d, mask, method)
        rhs = Aty + 2 * beta * T
        if mp.cg_iters > 0:
            X, res, r = batched_cg(lambda v: op.normal(v) + (2 * beta) * v, rhs, X, mp.cg_iters,
                                   return_residual=True)
            cg_res.append(res)
        else:
            r = rhs - op.normal(X) - 2 * beta * X
        NX = rhs - r - 2 * beta * X
        data = 0.5 * (np.vdot(X, NX).real - 2 * np.vdot(X, Aty).real + yy)
        trace.append(float(data + beta * np.linalg.norm(X - T) ** 2))
    _, maps = manifold_targets(X, d, mask, method)
    return ReconResult(X, param_maps=maps, objective_trace=trace,
                       diagnostics={"beta": beta, "cg_residual": cg_res,
                                    "n_degenerate": int(maps["degenerate"].sum()),
                                    "mask_voxels": int(mask.sum())})
