"""Digital phantoms with known parameter maps, ground-truth OSSI series and
synthetic multi-coil k-space."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .analysis import combine_l2, detrend, tsnr_map
from .bloch import SampleTime, SequenceParams
from .encoding import CoilMaps, EncodingOp
from .errors import DimensionMismatchError, InvalidParameterError
from .voxel import (FmriProtocol, IntegrationGrid, VoxelParams, block_task,
                    frame_off_resonance, hrf_reference, voxel_signal)

__all__ = [
    "GRAY_MATTER",
    "WHITE_MATTER",
    "CSF",
    "Region",
    "PhantomSpec",
    "GroundTruth",
    "reference_phantom_spec",
    "make_phantom",
    "make_coil_maps",
    "synthesize_kspace",
    "noise_sigma_for_tsnr",
    "summary_tsnr_db",
]

# (T1, T2) presets in ms; only gray matter is anchored in measurements
GRAY_MATTER = (1433.2, 92.6)
WHITE_MATTER = (800.0, 70.0)
CSF = (4000.0, 500.0)


@dataclass
class Region:
    """Ellipse (``center``, ``radii``) or rectangle (``lo``, ``hi``) in
    normalized coordinates spanning [-1, 1] on both axes."""

    shape: str
    voxel: VoxelParams | None = None
    center: tuple = (0.0, 0.0)
    radii: tuple = (1.0, 1.0)
    lo: tuple = (-1.0, -1.0)
    hi: tuple = (1.0, 1.0)
    delta_t2p_ms: float = 15.4

    def mask(self, nx: int, ny: int) -> np.ndarray:
        x = (np.arange(nx) + 0.5) / nx * 2 - 1
        y = (np.arange(ny) + 0.5) / ny * 2 - 1
        X, Y = np.meshgrid(x, y, indexing="ij")
        if self.shape == "ellipse":
            return ((X - self.center[0]) / self.radii[0]) ** 2 + \
                ((Y - self.center[1]) / self.radii[1]) ** 2 <= 1.0
        if self.shape == "rect":
            return (X >= self.lo[0]) & (X <= self.hi[0]) & (Y >= self.lo[1]) & (Y <= self.hi[1])
        raise InvalidParameterError(f"unknown region shape {self.shape!r}")

    def to_dict(self) -> dict:
        d = {"shape": self.shape, "delta_t2p_ms": self.delta_t2p_ms}
        if self.shape == "ellipse":
            d.update(center=list(self.center), radii=list(self.radii))
        else:
            d.update(lo=list(self.lo), hi=list(self.hi))
        if self.voxel is not None:
            v = self.voxel
            d["voxel"] = {"t1_ms": v.t1_ms, "t2_ms": v.t2_ms, "t2p_ms": v.t2p_ms,
                          "f0_hz": v.f0_hz, "m0": [complex(v.m0).real, complex(v.m0).imag]}
        return d


@dataclass
class PhantomSpec:
    nx: int = 48
    ny: int = 48
    regions: list = field(default_factory=list)
    activation_roi: Region | None = None
    protocol: FmriProtocol | None = None
    n_coils: int = 4
    seed: int = 0
    seq: SequenceParams = field(default_factory=lambda: SequenceParams(15.0, 2.7, 10, 10.0))
    integration: IntegrationGrid = field(default_factory=IntegrationGrid)
    sample_time: SampleTime = SampleTime.AT_TE

    @property
    def t_s(self) -> int:
        return self.protocol.task.size


@dataclass
class GroundTruth:
    images: np.ndarray          # (nx, ny, n_c, t_s)
    mask: np.ndarray            # (nx, ny)
    roi: np.ndarray             # (nx, ny)
    m0: np.ndarray
    t1: np.ndarray
    t2: np.ndarray
    t2p: np.ndarray             # rest T2'
    f0: np.ndarray              # base f0
    t2p_t: np.ndarray           # (nx, ny, t_s)
    f0_t: np.ndarray            # (nx, ny, t_s)
    task: np.ndarray
    reference: np.ndarray
    spec: PhantomSpec

    @property
    def r2s(self) -> np.ndarray:
        return _r2s(self.t2, self.t2p, self.mask)

    @property
    def r2s_t(self) -> np.ndarray:
        return _r2s(self.t2[..., None], self.t2p_t, self.mask[..., None])

    def voxel_at(self, ix: int, iy: int, frame: int) -> VoxelParams:
        return VoxelParams(self.t1[ix, iy], self.t2[ix, iy], self.t2p_t[ix, iy, frame],
                           self.f0_t[ix, iy, frame], self.m0[ix, iy])


def _r2s(t2, t2p, mask):
    with np.errstate(divide="ignore"):
        r = 1000.0 / np.where(mask, t2, np.inf) + 1000.0 / np.where(mask, t2p, np.inf)
    return np.where(mask, r, 0.0)


def reference_phantom_spec(t_s: int = 50, seed: int = 0, n_coils: int = 4, nx: int = 48,
                           ny: int = 48, frame_period_s: float = 2.0,
                           target_tsnr_db: float | None = 38.0) -> PhantomSpec:
    """Desk-scale reference phantom.

    Three gray-matter compartments with different T2', f0 and m0, and a
    rectangular activation ROI in the bottom third.  Slow frames are
    ``frame_period_s`` apart under a 20 s off / 20 s on block task.
    """
    t1, t2 = GRAY_MATTER
    regions = [
        Region("ellipse", VoxelParams(t1, t2, 125.0, 0.0, 1.0), center=(0.0, 0.0),
               radii=(0.85, 0.92)),
        Region("ellipse", VoxelParams(t1, t2, 80.0, -6.0, 0.8), center=(-0.35, -0.3),
               radii=(0.3, 0.3)),
        Region("rect", VoxelParams(t1, t2, 60.0, 10.0, 0.9), lo=(0.2, -0.6), hi=(0.6, -0.1)),
    ]
    roi = Region("rect", lo=(-0.5, 0.4), hi=(0.0, 0.75), delta_t2p_ms=15.4)
    task = block_task(t_s, frame_period_s, 20.0)
    protocol = FmriProtocol(task=task, frame_period_s=frame_period_s,
                            target_tsnr_db=target_tsnr_db, seed=seed)
    return PhantomSpec(nx, ny, regions, roi, protocol, n_coils, seed)


def make_phantom(spec: PhantomSpec) -> GroundTruth:
    """Noiseless ground-truth series and parameter maps."""
    nx, ny = spec.nx, spec.ny
    if not spec.regions:
        raise InvalidParameterError("phantom needs at least one region")
    if spec.protocol is None:
        raise InvalidParameterError("phantom needs a protocol")
    label = np.full((nx, ny), -1, dtype=int)
    for i, reg in enumerate(spec.regions):
        if reg.voxel is None:
            raise InvalidParameterError("every region needs voxel parameters")
        label[reg.mask(nx, ny)] = i
    mask = label >= 0
    if not mask.any():
        raise InvalidParameterError("regions cover no voxels")
    roi = np.zeros((nx, ny), bool)
    delta = 0.0
    if spec.activation_roi is not None:
        roi = spec.activation_roi.mask(nx, ny)
        delta = spec.activation_roi.delta_t2p_ms
        if not roi.any():
            raise InvalidParameterError("activation ROI covers no voxels")
        if not np.all(mask[roi]) or np.unique(label[roi]).size != 1:
            raise InvalidParameterError("activation ROI must lie inside a single region")
    seq = spec.seq
    prot = spec.protocol
    t_s = prot.task.size
    dt = prot.frame_period_s if prot.frame_period_s is not None else seq.t_ossi_ms / 1000.0
    ref = hrf_reference(prot.task, dt)

    shape = (nx, ny)
    m0 = np.zeros(shape, complex)
    t1 = np.zeros(shape)
    t2 = np.zeros(shape)
    t2p = np.zeros(shape)
    f0 = np.zeros(shape)
    t2p_t = np.zeros(shape + (t_s,))
    f0_t = np.zeros(shape + (t_s,))
    images = np.zeros(shape + (seq.n_c, t_s), complex)
    cache = {}
    for i, reg in enumerate(spec.regions):
        v = reg.voxel
        for active in (False, True):
            sel = (label == i) & (roi if active else ~roi)
            if not sel.any():
                continue
            tp = v.t2p_ms - (delta * ref if active else 0.0)
            if np.any(tp <= 0):
                raise InvalidParameterError("activation drives T2' non-positive")
            ff = frame_off_resonance(v.f0_hz, prot, dt)
            m0[sel], t1[sel], t2[sel], t2p[sel], f0[sel] = v.m0, v.t1_ms, v.t2_ms, v.t2p_ms, v.f0_hz
            t2p_t[sel] = tp
            f0_t[sel] = ff
            for k in range(t_s):
                key = (v.t1_ms, v.t2_ms, float(np.broadcast_to(tp, (t_s,))[k]), float(ff[k]))
                if key not in cache:
                    cache[key] = voxel_signal(seq, VoxelParams(key[0], key[1], key[2], key[3], 1.0),
                                              spec.integration, spec.sample_time)
                images[sel, :, k] = v.m0 * cache[key]
    return GroundTruth(images, mask, roi, m0, t1, t2, t2p, f0, t2p_t, f0_t, prot.task, ref, spec)


def make_coil_maps(nx: int, ny: int, n_coils: int, seed: int = 0, mask=None) -> CoilMaps:
    """Smooth complex sensitivities normalized to unit sum of squares.

    Coils sit on a ring around the field of view with Gaussian magnitude
    falloff and a random low-order polynomial phase.  Normalization is
    applied on the whole grid, so the SoS is one inside any mask.
    """
    if n_coils < 1:
        raise InvalidParameterError("n_coils must be at least 1")
    if mask is None:
        mask = np.ones((nx, ny), bool)
    if n_coils == 1:
        return CoilMaps(np.ones((1, nx, ny), complex), mask)
    rng = np.random.default_rng(seed)
    x = (np.arange(nx) + 0.5) / nx * 2 - 1
    y = (np.arange(ny) + 0.5) / ny * 2 - 1
    X, Y = np.meshgrid(x, y, indexing="ij")
    maps = np.empty((n_coils, nx, ny), complex)
    for c in range(n_coils):
        ang = 2 * math.pi * c / n_coils + rng.uniform(-0.2, 0.2)
        cx, cy = 1.3 * math.cos(ang), 1.3 * math.sin(ang)
        mag = np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2 * 0.9 ** 2))
        p = rng.normal(scale=0.6, size=5)
        phase = p[0] + p[1] * X + p[2] * Y + p[3] * X * Y + p[4] * (X ** 2 - Y ** 2)
        maps[c] = mag * np.exp(1j * phase)
    maps /= np.sqrt(np.sum(np.abs(maps) ** 2, axis=0))
    return CoilMaps(maps, mask)


def summary_tsnr_db(series, reference, mask, n_detrend: int = 4) -> float:
    """Mean tSNR (dB, amplitude convention) over ``mask`` of the combined,
    detrended series."""
    comb = combine_l2(series)
    if n_detrend:
        comb = detrend(comb, n_detrend)
    t = tsnr_map(comb, reference)[np.asarray(mask, bool)]
    return float(20 * np.log10(np.mean(t)))


def noise_sigma_for_tsnr(images, reference, mask, target_tsnr_db: float, seed: int = 0,
                         n_detrend: int = 4) -> float:
    """Complex noise level per image sample that yields the target tSNR.

    Uses a seeded image-domain white-noise draw, which is what a fully
    sampled adjoint reconstruction sees with unit-SoS coil maps.
    """
    rng = np.random.default_rng([seed, 0x7a5])
    z = (rng.standard_normal(images.shape) + 1j * rng.standard_normal(images.shape)) / math.sqrt(2)

    def db(s):
        return summary_tsnr_db(images + s * z, reference, mask, n_detrend) - target_tsnr_db

    mu = float(np.mean(combine_l2(images)[np.asarray(mask, bool)]))
    if mu == 0:
        raise InvalidParameterError("cannot reach a tSNR target with a zero signal")
    if db(0.0) <= 0:
        raise InvalidParameterError("signal fluctuations alone are below the tSNR target")
    guess = math.sqrt(2) * mu / 10 ** (target_tsnr_db / 20.0)
    hi = guess
    while db(hi) > 0:
        hi *= 2
    return float(optimize.brentq(db, 0.0, hi, xtol=1e-12 * guess))


def synthesize_kspace(gt: GroundTruth, op: EncodingOp, noise_sigma: float | None = None,
                      target_tsnr_db: float | None = None, seed: int = 0):
    """Noisy k-space ``A(images) + n``; returns ``(y, sigma)``.

    Either give ``noise_sigma`` directly (complex std per sample) or a
    ``target_tsnr_db`` for the fully sampled reconstruction.
    """
    if gt.images.shape != op.image_shape:
        raise DimensionMismatchError(
            f"ground truth {gt.images.shape} does not match operator {op.image_shape}")
    if noise_sigma is not None and target_tsnr_db is not None:
        raise InvalidParameterError("give noise_sigma or target_tsnr_db, not both")
    y = op.forward(gt.images)
    sigma = 0.0
    if target_tsnr_db is not None and math.isfinite(target_tsnr_db):
        sigma = noise_sigma_for_tsnr(gt.images, gt.reference, gt.mask, target_tsnr_db, seed)
    elif noise_sigma:
        sigma = float(noise_sigma)
    if sigma > 0:
        rng = np.random.default_rng(seed)
        n = (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape)) / math.sqrt(2)
        n *= sigma * op.scale
        if op.mode == "cartesian":
            n *= op.mask[None]
        y = y + n
    return y, sigma
