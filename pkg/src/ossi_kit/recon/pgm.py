"""Global low-rank reconstruction by POGM with adaptive restart.

Each slow frame is the matrix ``(nx*ny) x n_c`` of its fast-time images,
and the cost

    0.5 * ||A X - y||^2 + alpha * sum_t ||X_t||_*

is separable over slow frames, so every frame carries its own momentum
state and restarts independently.
"""

from __future__ import annotations

import math

import numpy as np

from ..encoding import EncodingOp, operator_norm
from ..errors import DimensionMismatchError, InvalidParameterError
from .common import ReconResult

__all__ = ["lowrank_pgm", "frame_matrices", "from_frame_matrices", "auto_alpha"]


def frame_matrices(X):
    """``(nx, ny, n_c, t_s)`` -> ``(t_s, nx*ny, n_c)``."""
    nx, ny, nc, ts = X.shape
    return np.moveaxis(X, 3, 0).reshape(ts, nx * ny, nc)


def from_frame_matrices(M, shape):
    nx, ny, nc, ts = shape
    return np.moveaxis(M.reshape(ts, nx, ny, nc), 0, 3)


def _prox(X, tau):
    """Frame-wise SVT; ``tau`` is a scalar or one threshold per slow frame."""
    tau = np.broadcast_to(np.asarray(tau, dtype=float), (X.shape[3],))
    if not np.any(tau):
        return X.copy()
    U, s, Vh = np.linalg.svd(frame_matrices(X), full_matrices=False)
    s = np.maximum(s - tau[:, None], 0.0)
    return from_frame_matrices((U * s[:, None, :]) @ Vh, X.shape)


def _frame_costs(op, X, y, alpha):
    r = op.forward(X) - y
    data = 0.5 * np.sum(np.abs(r) ** 2, axis=tuple(range(r.ndim - 1)))
    if alpha == 0:
        return data
    sv = np.linalg.svd(frame_matrices(X), compute_uv=False)
    return data + alpha * sv.sum(axis=1)


def auto_alpha(x_init, lip: float, rank: int = 4) -> float:
    """Threshold between the ``rank``-th and next singular values.

    The geometric mean of those singular values, taken as the median over
    frames, scaled by ``lip`` so that the prox threshold ``alpha/L`` keeps
    about ``rank`` components.
    """
    sv = np.linalg.svd(frame_matrices(np.asarray(x_init)), compute_uv=False)
    if sv.shape[1] <= rank:
        return 0.0
    return float(lip * np.median(np.sqrt(sv[:, rank - 1] * sv[:, rank])))


def lowrank_pgm(y, op: EncodingOp, alpha="auto", iters: int = 15, x0=None,
                lip: float | None = None, target_rank: int = 4) -> ReconResult:
    """Proximal optimized gradient method with objective restart.

    When a frame's cost increases, or its new gradient step points back
    against the previous one, that frame's momentum step is rejected
    and replaced by a plain proximal gradient step from the previous
    iterate with step ``1/L``; its momentum state is reset.  The per-frame
    costs, and hence their sum in ``objective_trace``, are therefore
    non-increasing.

    ``alpha="auto"`` picks the weight from the singular values of
    ``x0`` (the adjoint reconstruction by default) so that roughly
    ``target_rank`` components survive.
    """
    y = np.asarray(y)
    if y.shape != op.data_shape:
        raise DimensionMismatchError(f"data {y.shape} vs operator {op.data_shape}")
    if iters < 1:
        raise InvalidParameterError("iters must be at least 1")
    if lip is None:
        lip = 1.01 * operator_norm(op, iters=30) ** 2
    if lip <= 0:
        raise InvalidParameterError("operator has zero norm")
    x = op.adjoint(y) if x0 is None else np.array(x0, dtype=complex)
    if isinstance(alpha, str):
        if alpha != "auto":
            raise InvalidParameterError(f"alpha must be a number or 'auto', got {alpha!r}")
        alpha = auto_alpha(x, lip, target_rank)
    alpha = float(alpha)
    if alpha < 0:
        raise InvalidParameterError("alpha must be non-negative")
    ts = op.t_s
    bshape = (1, 1, 1, ts)
    theta = np.ones(ts)
    gamma = np.full(ts, 1.0 / lip)
    w_old = x.copy()
    z = x.copy()
    cost = _frame_costs(op, x, y, alpha)
    trace = [float(cost.sum())]
    restarts = []
    Aty = op.adjoint(y)
    for k in range(1, iters + 1):
        last = k == iters
        grad = op.normal(x) - Aty
        w = x - grad / lip
        theta_new = 0.5 * (1 + np.sqrt((8.0 if last else 4.0) * theta ** 2 + 1))
        gamma_new = (2 * theta + theta_new - 1) / (lip * theta_new)
        a = ((theta - 1) / theta_new).reshape(bshape)
        b = (theta / theta_new).reshape(bshape)
        c = ((theta - 1) / (lip * gamma * theta_new)).reshape(bshape)
        z = w + a * (w - w_old) + b * (w - x) + c * (z - x)
        x_new = _prox(z, alpha * gamma_new)
        cost_new = _frame_costs(op, x_new, y, alpha)
        # gradient restart: the new gradient step opposes the previous one
        turned = np.real(np.sum(grad.conj() * (w - w_old), axis=(0, 1, 2))) > 0
        bad = (cost_new > cost) | turned
        if np.any(bad):
            plain = _prox(w, alpha / lip)
            sel = bad.reshape(bshape)
            x_new = np.where(sel, plain, x_new)
            z = np.where(sel, plain, z)
            w = np.where(sel, plain, w)
            cost_new = _frame_costs(op, x_new, y, alpha)
            theta_new = np.where(bad, 1.0, theta_new)
            gamma_new = np.where(bad, 1.0 / lip, gamma_new)
            restarts.append((k, np.flatnonzero(bad).tolist()))
        x, w_old, theta, gamma, cost = x_new, w, theta_new, gamma_new, cost_new
        trace.append(float(cost.sum()))
    ranks = np.linalg.matrix_rank(frame_matrices(x), tol=1e-8 * max(1.0, np.abs(x).max()))
    return ReconResult(x, objective_trace=trace,
                       diagnostics={"alpha": alpha, "lipschitz": lip, "restarts": restarts,
                                    "ranks": np.asarray(ranks).tolist()})
