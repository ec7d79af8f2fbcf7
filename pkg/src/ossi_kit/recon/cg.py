"""Conjugate gradient solvers, CG-SENSE and data-shared initialization."""

from __future__ import annotations

import numpy as np

from ..encoding import EncodingOp, NufftPlan
from ..errors import DimensionMismatchError, InvalidParameterError, SolverDivergenceError
from .common import ReconResult

__all__ = ["batched_cg", "finite_diff", "finite_diff_adjoint", "cg_sense", "data_shared_init",
           "zero_filled"]

# spatial axes of an image series
_SPACE = (0, 1)


def _dot(a, b, axes):
    return np.sum(np.conj(a) * b, axis=axes, keepdims=True)


def batched_cg(apply, b, x0, iters: int, axes=_SPACE, tol: float = 1e-12,
               divergence_window: int = 5, return_residual: bool = False):
    """CG on independent Hermitian positive systems sharing one operator.

    Inner products are taken over ``axes`` only, so every remaining index
    (e.g. each frame) runs its own CG recursion.  Returns ``(x, residuals)``
    with the global residual norm per iteration, plus the final residual
    vector ``b - apply(x)`` when ``return_residual``.  A residual that grows
    ``divergence_window`` times in a row raises
    :class:`SolverDivergenceError`.
    """
    x = np.array(x0, dtype=complex, copy=True)
    r = b - apply(x)
    p = r.copy()
    rr = np.real(_dot(r, r, axes))
    bnorm = np.sqrt(np.real(np.vdot(b, b)))
    floor = (tol * bnorm) ** 2 if bnorm > 0 else 0.0
    trace = [float(np.sqrt(rr.sum()))]
    ups = 0
    for _ in range(int(iters)):
        if rr.sum() <= floor:
            break
        Ap = apply(p)
        pAp = np.real(_dot(p, Ap, axes))
        active = (rr > 0) & (pAp > 0)
        alpha = np.where(active, rr / np.where(active, pAp, 1.0), 0.0)
        x = x + alpha * p
        r = r - alpha * Ap
        rr_new = np.real(_dot(r, r, axes))
        beta = np.where(rr > 0, rr_new / np.where(rr > 0, rr, 1.0), 0.0)
        p = r + beta * p
        rr = rr_new
        trace.append(float(np.sqrt(rr.sum())))
        ups = ups + 1 if trace[-1] > trace[-2] else 0
        if ups >= divergence_window:
            raise SolverDivergenceError("CG residual increased over consecutive iterations",
                                        trace=trace)
    if return_residual:
        return x, trace, r
    return x, trace


def finite_diff(x):
    """Periodic forward differences along x and y, stacked on a new axis 0."""
    return np.stack([np.roll(x, -1, axis=0) - x, np.roll(x, -1, axis=1) - x])


def finite_diff_adjoint(d):
    return (np.roll(d[0], 1, axis=0) - d[0]) + (np.roll(d[1], 1, axis=1) - d[1])


def _huber(t, alpha, delta):
    a = np.abs(t)
    return alpha * np.where(a <= delta, 0.5 * a ** 2, delta * a - 0.5 * delta ** 2)


def _parse_reg(reg):
    if reg is None or reg == "none":
        return "none", 0.0, np.inf
    if isinstance(reg, dict):
        kind = reg.get("kind", "none")
        return kind, float(reg.get("alpha", 0.0)), float(reg.get("delta", np.inf))
    kind = reg[0]
    alpha = float(reg[1]) if len(reg) > 1 else 0.0
    delta = float(reg[2]) if len(reg) > 2 else np.inf
    return kind, alpha, delta


def cg_sense(y, op: EncodingOp, reg=None, iters: int = 19, x0=None, huber_passes: int = 3):
    """Frame-wise regularized least squares by conjugate gradients.

    Minimizes ``0.5*||A x - y||^2 + sum_j psi([C x]_j)`` with ``C`` the
    periodic finite differences along x and y.  ``reg`` is ``None``,
    ``("quadratic", alpha)`` or ``("huber", alpha, delta)``; Huber is
    handled by ``huber_passes`` rounds of iteratively reweighted quadratic
    majorization with weights ``alpha*min(1, delta/|t|)``, each running
    ``iters`` CG steps.
    """
    kind, alpha, delta = _parse_reg(reg)
    if kind not in ("none", "quadratic", "huber"):
        raise InvalidParameterError(f"unknown regularizer {kind!r}")
    if alpha < 0 or delta <= 0:
        raise InvalidParameterError("alpha must be >= 0 and delta > 0")
    y = np.asarray(y)
    if y.shape != op.data_shape:
        raise DimensionMismatchError(f"data {y.shape} vs operator {op.data_shape}")
    b = op.adjoint(y)
    x = np.zeros(op.image_shape, complex) if x0 is None else np.array(x0, dtype=complex)

    def objective(z):
        val = 0.5 * np.linalg.norm(op.forward(z) - y) ** 2
        if kind == "quadratic":
            val += 0.5 * alpha * np.linalg.norm(finite_diff(z)) ** 2
        elif kind == "huber":
            val += float(np.sum(_huber(finite_diff(z), alpha, delta)))
        return float(val)

    trace = [objective(x)]
    residuals = []
    if kind == "none" or alpha == 0:
        x, res = batched_cg(op.normal, b, x, iters)
        residuals.extend(res)
    elif kind == "quadratic":
        x, res = batched_cg(lambda z: op.normal(z) + alpha * finite_diff_adjoint(finite_diff(z)),
                            b, x, iters)
        residuals.extend(res)
    else:
        for _ in range(huber_passes):
            t = np.abs(finite_diff(x))
            with np.errstate(divide="ignore", invalid="ignore"):
                w = alpha * np.where(t > delta, delta / np.where(t > 0, t, 1.0), 1.0)
            x, res = batched_cg(lambda z, w=w: op.normal(z) + finite_diff_adjoint(w * finite_diff(z)),
                                b, x, iters)
            residuals.extend(res)
            trace.append(objective(x))
    if kind != "huber":
        trace.append(objective(x))
    return ReconResult(x, objective_trace=trace, diagnostics={"cg_residuals": residuals,
                                                              "reg": kind})


def zero_filled(y, op: EncodingOp):
    """Adjoint reconstruction of the acquired data."""
    return op.adjoint(y)


def data_shared_init(y, op: EncodingOp, window: int = 10, density_weights=None):
    """View-shared initial images.

    Slow frames are grouped into non-overlapping windows.  Within a group,
    every frame at a given fast index keeps its own samples and borrows
    the remaining ones from the other frames of the group; a location
    sampled by several other frames gets their average.  Each frame is
    then reconstructed by the adjoint.  Non-uniform data pool the
    trajectories of the group, weighting every sample by ``1/group size``
    unless ``density_weights`` are given.
    """
    y = np.asarray(y)
    if y.shape != op.data_shape:
        raise DimensionMismatchError(f"data {y.shape} vs operator {op.data_shape}")
    if window < 1 or window > op.t_s:
        raise InvalidParameterError(f"window {window} must be in [1, {op.t_s}]")
    if op.mode == "cartesian":
        mask = np.broadcast_to(op.mask, op.image_shape)
        full = np.zeros(op.data_shape, complex)
        shared = np.zeros(op.image_shape, dtype=bool)
        for g0 in range(0, op.t_s, window):
            sl = slice(g0, min(g0 + window, op.t_s))
            m = mask[..., sl].astype(float)
            ysum = np.sum(y[..., sl] * m[None], axis=-1, keepdims=True)
            cnt = np.sum(m, axis=-1, keepdims=True)
            for t in range(sl.start, sl.stop):
                own = mask[..., t]
                others = cnt[..., 0] - own
                borrowed = (ysum[..., 0] - y[..., t] * own[None]) / np.maximum(others, 1)[None]
                full[..., t] = np.where(own[None], y[..., t], np.where(others[None] > 0,
                                                                        borrowed, 0))
                shared[..., t] = own | (others > 0)
        wide = EncodingOp(op.coils, op.n_c, op.t_s, mask=shared, scale=op.scale)
        return wide.adjoint(full * shared[None])
    out = np.empty(op.image_shape, complex)
    S = op.coils.maps
    for g0 in range(0, op.t_s, window):
        frames = list(range(g0, min(g0 + window, op.t_s)))
        for n in range(op.n_c):
            traj = np.concatenate([op.traj[:, n, t] for t in frames])
            data = np.concatenate([y[:, :, n, t] for t in frames], axis=1)
            w = (1.0 / len(frames)) if density_weights is None else density_weights
            plan = NufftPlan(S.shape[1:], traj, op.width, op.oversampling)
            img = np.sum(np.conj(S) * plan.adjoint(data * w), axis=0) * op.scale
            for t in frames:
                out[:, :, n, t] = img
    return out
