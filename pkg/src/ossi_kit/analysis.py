"""Functional and reconstruction metrics.

Image series follow the toolkit layout ``(spatial..., n_c, t_s)``: the
fast-time axis is second to last and slow time is last.  Combined series
drop the fast axis, leaving ``(spatial..., t_s)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatchError, InvalidParameterError

__all__ = [
    "ActivationResult",
    "RocCurve",
    "ImpulseResponse",
    "combine_l2",
    "dct_basis",
    "detrend",
    "correlation_map",
    "correlation_activation",
    "bottom_third_mask",
    "tsnr_map",
    "nrmsd",
    "roc_auc",
    "r2s_rmse",
    "rmse",
    "impulse_response",
    "tune_scale_to_peak",
]


@dataclass
class ActivationResult:
    correlation_map: np.ndarray
    activation_mask: np.ndarray
    count_in_region: int
    zero_variance: np.ndarray


@dataclass
class RocCurve:
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float


@dataclass
class ImpulseResponse:
    response: np.ndarray
    peak: complex
    profile_x: np.ndarray
    profile_y: np.ndarray
    profile_fast: np.ndarray
    profile_slow: np.ndarray


def combine_l2(series, n_c: int | None = None) -> np.ndarray:
    """Euclidean norm over the fast-time axis (second to last)."""
    series = np.asarray(series)
    if series.ndim < 2:
        raise DimensionMismatchError("series needs fast and slow axes")
    if n_c is not None and series.shape[-2] != n_c:
        raise DimensionMismatchError(
            f"fast-time length {series.shape[-2]} does not match n_c={n_c}")
    return np.sqrt(np.sum(np.abs(series) ** 2, axis=-2))


def dct_basis(n: int, n_basis: int) -> np.ndarray:
    """Columns are DCT-II cosines of orders 0..n_basis-1 over ``n`` samples."""
    t = np.arange(n) + 0.5
    return np.stack([np.cos(math.pi * k * t / n) for k in range(n_basis)], axis=1)


def detrend(series, n_basis: int = 4, keep_mean: bool = True) -> np.ndarray:
    """Project out low-order DCT bases along the last axis.

    The mean (order 0) is removed with the trends and added back when
    ``keep_mean`` is set.
    """
    x = np.asarray(series)
    n = x.shape[-1]
    if n <= n_basis:
        raise InvalidParameterError(f"need more than {n_basis} frames, got {n}")
    B = dct_basis(n, n_basis)
    Q, _ = np.linalg.qr(B)
    flat = x.reshape(-1, n)
    resid = flat - (flat @ Q) @ Q.T
    if keep_mean:
        resid = resid + flat.mean(axis=1, keepdims=True)
    return resid.reshape(x.shape)


def correlation_map(series, reference):
    """Pearson correlation of every voxel time course with ``reference``.

    Returns the map and a mask of zero-variance voxels (correlation 0).
    """
    x = np.asarray(series, dtype=float)
    ref = np.asarray(reference, dtype=float).ravel()
    if x.shape[-1] != ref.size:
        raise DimensionMismatchError(
            f"series has {x.shape[-1]} frames but reference has {ref.size}")
    xc = x - x.mean(axis=-1, keepdims=True)
    rc = ref - ref.mean()
    num = xc @ rc
    den = np.sqrt(np.sum(xc ** 2, axis=-1)) * np.sqrt(np.sum(rc ** 2))
    scale = np.maximum(np.abs(x).max(axis=-1), 1e-300)
    flat = np.sqrt(np.sum(xc ** 2, axis=-1)) <= 1e-12 * scale * math.sqrt(ref.size)
    flat |= den == 0
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(flat, 0.0, num / np.where(flat, 1.0, den))
    return np.clip(corr, -1.0, 1.0), flat


def bottom_third_mask(shape) -> np.ndarray:
    """Boolean mask of the last floor(ny/3) indices along the y axis."""
    nx, ny = shape[0], shape[1]
    m = np.zeros((nx, ny) + tuple(shape[2:]), dtype=bool)
    k = ny // 3
    if k:
        m[:, ny - k:] = True
    return m


def correlation_activation(series, reference, threshold: float = 0.45, discard_frames: int = 0,
                           cluster_min: int = 0, region=None, mask=None) -> ActivationResult:
    """Correlation map and thresholded activation mask.

    ``discard_frames`` leading frames (e.g. the first task cycle) are
    dropped from both series and reference.  Clusters (face connectivity)
    smaller than ``cluster_min`` voxels are removed.  ``region`` selects
    the voxels counted in ``count_in_region`` (default: everything).
    """
    x = np.asarray(series)
    ref = np.asarray(reference, dtype=float).ravel()
    if x.shape[-1] != ref.size:
        raise DimensionMismatchError(
            f"series has {x.shape[-1]} frames but reference has {ref.size}")
    if discard_frames:
        x = x[..., discard_frames:]
        ref = ref[discard_frames:]
    corr, flat = correlation_map(x, ref)
    act = np.abs(corr) > threshold
    if mask is not None:
        act &= np.asarray(mask, bool)
    if cluster_min > 1:
        lab, n = ndimage.label(act)
        sizes = ndimage.sum(act, lab, index=np.arange(1, n + 1))
        keep = np.zeros(n + 1, dtype=bool)
        keep[1:] = sizes >= cluster_min
        act = keep[lab]
    count = int(act.sum() if region is None else (act & np.asarray(region, bool)).sum())
    return ActivationResult(corr, act, count, flat)


def tsnr_map(series, reference=None, mask=None) -> np.ndarray:
    """Temporal SNR: time-course mean over the residual standard deviation.

    The residual removes an intercept and, when given, a least-squares fit
    of ``reference``.  Voxels with zero residual get ``+inf``.  With a
    ``mask`` the map is zeroed outside.
    """
    x = np.asarray(series, dtype=float)
    n = x.shape[-1]
    cols = [np.ones(n)]
    if reference is not None:
        ref = np.asarray(reference, dtype=float).ravel()
        if ref.size != n:
            raise DimensionMismatchError(f"series has {n} frames but reference has {ref.size}")
        if np.ptp(ref) > 0:
            cols.append(ref)
    D = np.stack(cols, axis=1)
    Q, _ = np.linalg.qr(D)
    flat = x.reshape(-1, n)
    resid = flat - (flat @ Q) @ Q.T
    sd = np.sqrt(np.sum(resid ** 2, axis=1) / max(n - D.shape[1], 1))
    mean = flat.mean(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(sd > 1e-14 * np.maximum(np.abs(mean), 1e-300), mean / sd, np.inf)
    t = t.reshape(x.shape[:-1])
    if mask is not None:
        t = np.where(np.asarray(mask, bool), t, 0.0)
    return t


def nrmsd(x_hat, x_ref, mask=None) -> float:
    """``||x_ref - x_hat|| / ||x_ref||``, optionally over a spatial mask."""
    a = np.asarray(x_hat)
    b = np.asarray(x_ref)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"shape {a.shape} vs reference {b.shape}")
    if mask is not None:
        m = np.asarray(mask, bool)
        a = a[m]
        b = b[m]
    den = np.linalg.norm(b)
    if den == 0:
        raise InvalidParameterError("reference has zero norm")
    return float(np.linalg.norm(b - a) / den)


def roc_auc(corr_map, truth_mask, thresholds=None, mask=None) -> RocCurve:
    """ROC of ``|corr| > threshold`` against a ground-truth activation mask.

    ``thresholds`` defaults to -0.1..0.99 in steps of 0.001; ``"unique"``
    uses every distinct score.  The curve is closed at (0, 0) and (1, 1)
    and integrated with the trapezoid rule.
    """
    score = np.abs(np.asarray(corr_map, dtype=float))
    truth = np.asarray(truth_mask, bool)
    if score.shape != truth.shape:
        raise DimensionMismatchError(f"map {score.shape} vs truth {truth.shape}")
    if mask is not None:
        m = np.asarray(mask, bool)
        score, truth = score[m], truth[m]
    score, truth = score.ravel(), truth.ravel()
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0:
        raise InvalidParameterError("truth mask is empty")
    if n_neg == 0:
        raise InvalidParameterError("truth mask has no negatives")
    if thresholds is None:
        thr = np.round(np.arange(-0.1, 0.99 + 5e-4, 0.001), 6)
    elif isinstance(thresholds, str) and thresholds == "unique":
        u = np.unique(score)
        thr = np.concatenate([[u[0] - 1.0], u])
    else:
        thr = np.sort(np.asarray(thresholds, dtype=float))
    pos = np.sort(score[truth])
    neg = np.sort(score[~truth])
    tpr = (n_pos - np.searchsorted(pos, thr, side="right")) / n_pos
    fpr = (n_neg - np.searchsorted(neg, thr, side="right")) / n_neg
    fx = np.concatenate([[1.0], fpr, [0.0]])
    ty = np.concatenate([[1.0], tpr, [0.0]])
    auc = float(-np.trapezoid(ty, fx)) if hasattr(np, "trapezoid") else float(-np.trapz(ty, fx))
    return RocCurve(thr, tpr, fpr, auc)


def rmse(est, truth, mask=None) -> float:
    e = np.asarray(est, float)
    t = np.asarray(truth, float)
    if e.shape != t.shape:
        raise DimensionMismatchError(f"shape {e.shape} vs {t.shape}")
    if mask is not None:
        m = np.asarray(mask, bool)
        e, t = e[m], t[m]
    if e.size == 0:
        raise InvalidParameterError("no voxels to evaluate")
    return float(np.sqrt(np.mean((e - t) ** 2)))


def r2s_rmse(est_map, truth_map, magnitude_img, range_mask: bool = False, mask=None) -> float:
    """R2* RMSE (Hz) over voxels that pass the quantification filters.

    Voxels must exceed 10% of the peak magnitude and have truth R2* below
    50 Hz; ``range_mask`` further requires truth R2* in (12, 38) Hz.
    """
    est = np.asarray(est_map, float)
    truth = np.asarray(truth_map, float)
    mag = np.abs(np.asarray(magnitude_img))
    if not (est.shape == truth.shape == mag.shape):
        raise DimensionMismatchError(f"shapes {est.shape}, {truth.shape}, {mag.shape} differ")
    keep = (mag > 0.1 * mag.max()) & (truth < 50.0)
    if range_mask:
        keep &= (truth > 12.0) & (truth < 38.0)
    if mask is not None:
        keep &= np.asarray(mask, bool)
    if not keep.any():
        raise InvalidParameterError("no voxels left after R2* masking")
    return rmse(est, truth, keep)


def impulse_response(recon, y, op, j, t, eps: float = 1.0, base=None) -> ImpulseResponse:
    """Local impulse response of a (possibly nonlinear) reconstruction.

    ``recon`` maps k-space data to an image series shaped like
    ``op.image_shape``.  ``j`` is a spatial index ``(x, y)`` and ``t`` a
    frame index ``(fast, slow)``.  The perturbed data are
    ``y + eps * A(delta_{j,t})``.
    """
    shape = op.image_shape
    delta = np.zeros(shape, dtype=complex)
    jx, jy = j
    tf, tsl = t
    delta[jx, jy, tf, tsl] = 1.0
    if base is None:
        base = recon(y)
    pert = recon(y + eps * op.forward(delta))
    h = (pert - base) / eps
    return ImpulseResponse(h, h[jx, jy, tf, tsl], h[:, jy, tf, tsl], h[jx, :, tf, tsl],
                           h[jx, jy, :, tsl], h[jx, jy, tf, :])


def tune_scale_to_peak(peak_of_scale, target: float, lo: float, hi: float,
                       rel_tol: float = 0.05, max_steps: int = 8):
    """Geometric bisection for a regularization scale that hits ``target``.

    ``peak_of_scale`` must decrease as the scale grows.  Returns
    ``(scale, peak, steps)``; ``steps`` counts evaluations after the
    bracket check.
    """
    if not (0 < lo < hi):
        raise InvalidParameterError("need 0 < lo < hi")
    p_lo, p_hi = abs(peak_of_scale(lo)), abs(peak_of_scale(hi))
    if not (p_hi <= target <= p_lo):
        raise InvalidParameterError(
            f"target peak {target:.4g} not bracketed by [{p_hi:.4g}, {p_lo:.4g}]")
    mid, p = lo, p_lo
    for step in range(1, max_steps + 1):
        mid = math.sqrt(lo * hi)
        p = abs(peak_of_scale(mid))
        if abs(p - target) <= rel_tol * target:
            return mid, p, step
        if p > target:
            lo = mid
        else:
            hi = mid
    return mid, p, max_steps
