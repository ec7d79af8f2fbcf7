"""Voxel signals from Cauchy-distributed intravoxel off-resonance, and fMRI
time-course synthesis."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from .bloch import SampleTime, SequenceParams, steady_state_cycles
from .errors import InvalidParameterError

__all__ = [
    "VoxelParams",
    "IntegrationGrid",
    "FmriProtocol",
    "t2star_ms",
    "t2p_from_t2star",
    "cauchy_pdf",
    "cauchy_weights",
    "voxel_signal",
    "voxel_cycles",
    "hrf_kernel",
    "hrf_reference",
    "block_task",
    "simulate_fmri_voxel",
    "frame_off_resonance",
    "calibrate_noise_scale",
    "percent_change",
    "estimate_te_eff",
]


@dataclass(frozen=True)
class VoxelParams:
    """Voxel tissue parameters (times in ms, frequency in Hz)."""

    t1_ms: float = 1433.2
    t2_ms: float = 92.6
    t2p_ms: float = 148.3
    f0_hz: float = 0.0
    m0: complex = 1.0

    def __post_init__(self):
        if not self.t2p_ms > 0:
            raise InvalidParameterError(f"t2p_ms must be positive, got {self.t2p_ms}")
        if not (self.t2_ms > 0 and self.t1_ms >= self.t2_ms):
            raise InvalidParameterError(
                f"need t1 >= t2 > 0, got t1={self.t1_ms}, t2={self.t2_ms}")

    @property
    def t2s_ms(self) -> float:
        return t2star_ms(self.t2_ms, self.t2p_ms)

    @property
    def r2s_hz(self) -> float:
        return 1000.0 / self.t2s_ms

    def replace(self, **changes) -> "VoxelParams":
        d = dict(t1_ms=self.t1_ms, t2_ms=self.t2_ms, t2p_ms=self.t2p_ms,
                 f0_hz=self.f0_hz, m0=self.m0)
        d.update(changes)
        return VoxelParams(**d)


@dataclass(frozen=True)
class IntegrationGrid:
    f_min_hz: float = -200.0
    f_max_hz: float = 200.0
    n_iso: int = 4000

    def __post_init__(self):
        if self.n_iso < 2:
            raise InvalidParameterError("n_iso must be at least 2")
        if not self.f_min_hz < self.f_max_hz:
            raise InvalidParameterError("f_min_hz must be below f_max_hz")

    @property
    def freqs(self) -> np.ndarray:
        return np.linspace(self.f_min_hz, self.f_max_hz, self.n_iso)


@dataclass
class FmriProtocol:
    """Task and physiological settings for a simulated voxel time course.

    ``task`` holds one 0/1 value per slow frame.  ``target_tsnr_db`` of
    ``None`` (or ``inf``) disables noise.
    """

    task: np.ndarray
    delta_t2p_ms: float = 15.4
    drift_hz_per_min: float = 1.0
    resp_amp_hz: float = 0.5
    resp_period_s: float = 4.2
    target_tsnr_db: float | None = 38.0
    seed: int = 0
    frame_period_s: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.task = np.asarray(self.task, dtype=float).ravel()
        if self.task.size < 1:
            raise InvalidParameterError("task must have at least one slow frame")
        if self.target_tsnr_db is not None and math.isnan(self.target_tsnr_db):
            raise InvalidParameterError("target_tsnr_db must not be NaN")

    @property
    def noisy(self) -> bool:
        return self.target_tsnr_db is not None and math.isfinite(self.target_tsnr_db)


def t2star_ms(t2_ms: float, t2p_ms: float) -> float:
    """T2* from 1/T2* = 1/T2 + 1/T2'."""
    if t2_ms <= 0 or t2p_ms <= 0:
        raise InvalidParameterError("relaxation times must be positive")
    return 1.0 / (1.0 / t2_ms + 1.0 / t2p_ms)


def t2p_from_t2star(t2_ms: float, t2s_ms: float) -> float:
    if not 0 < t2s_ms < t2_ms:
        raise InvalidParameterError("need 0 < T2* < T2")
    return 1.0 / (1.0 / t2s_ms - 1.0 / t2_ms)


def cauchy_pdf(f, t2p_ms: float):
    """Cauchy density of intravoxel off-resonance, gamma = 1/(2*pi*T2')."""
    if not t2p_ms > 0:
        raise InvalidParameterError(f"t2p_ms must be positive, got {t2p_ms}")
    gamma = 1000.0 / (2.0 * math.pi * t2p_ms)
    f = np.asarray(f, dtype=float)
    return gamma / (math.pi * (gamma ** 2 + f ** 2))


def cauchy_weights(t2p_ms: float, grid: IntegrationGrid) -> np.ndarray:
    """Riemann weights on ``grid`` renormalized to sum to one."""
    w = cauchy_pdf(grid.freqs, t2p_ms)
    return w / w.sum()


def voxel_signal(seq: SequenceParams, voxel: VoxelParams, grid: IntegrationGrid | None = None,
                 sample_time=SampleTime.AT_TE) -> np.ndarray:
    """Steady-state fast-time cycle of a voxel (length ``n_c``)."""
    grid = grid or IntegrationGrid()
    w = cauchy_weights(voxel.t2p_ms, grid)
    cyc = steady_state_cycles(seq, voxel.t1_ms, voxel.t2_ms, voxel.f0_hz + grid.freqs, sample_time)
    return voxel.m0 * (w @ cyc)


def voxel_cycles(seq: SequenceParams, t1_ms: float, t2_ms: float, t2p_ms, f0_hz,
                 grid: IntegrationGrid | None = None, sample_time=SampleTime.AT_TE) -> np.ndarray:
    """Unit-m0 voxel cycles for many (T2', f0) pairs sharing T1 and T2.

    ``t2p_ms`` and ``f0_hz`` broadcast together; the result has shape
    ``broadcast_shape + (n_c,)``.
    """
    grid = grid or IntegrationGrid()
    t2p, f0 = np.broadcast_arrays(np.asarray(t2p_ms, float), np.asarray(f0_hz, float))
    out = np.empty(t2p.shape + (seq.n_c,), dtype=complex)
    for idx in np.ndindex(t2p.shape):
        w = cauchy_weights(float(t2p[idx]), grid)
        cyc = steady_state_cycles(seq, t1_ms, t2_ms, float(f0[idx]) + grid.freqs, sample_time)
        out[idx] = w @ cyc
    return out


# ---------------------------------------------------------------------------
# task reference
# ---------------------------------------------------------------------------

HRF_PEAK_S = 6.0
HRF_UNDERSHOOT_S = 16.0
HRF_RATIO = 1.0 / 6.0
HRF_LENGTH_S = 32.0


def hrf_kernel(dt_s: float) -> np.ndarray:
    """Double-gamma HRF sampled every ``dt_s`` over its 32 s support."""
    if not dt_s > 0:
        raise InvalidParameterError("dt_s must be positive")
    t = np.arange(0.0, HRF_LENGTH_S + 1e-9, dt_s)
    # unit-scale gamma densities whose modes sit at the peak and undershoot times
    h = stats.gamma.pdf(t, HRF_PEAK_S + 1) - HRF_RATIO * stats.gamma.pdf(t, HRF_UNDERSHOOT_S + 1)
    return h


def hrf_reference(task, frame_period_s: float) -> np.ndarray:
    """Task convolved with the canonical HRF, truncated, peak-normalized."""
    task = np.asarray(task, dtype=float).ravel()
    if task.size < 1:
        raise InvalidParameterError("task must have at least one frame")
    ref = np.convolve(task, hrf_kernel(frame_period_s))[: task.size]
    peak = np.max(np.abs(ref))
    return ref / peak if peak > 0 else np.zeros_like(ref)


def block_task(n_frames: int, frame_period_s: float, half_period_s: float = 20.0,
               start_active: bool = False) -> np.ndarray:
    """Alternating rest/active block design with ``half_period_s`` blocks."""
    t = np.arange(n_frames) * frame_period_s
    on = (np.floor(t / half_period_s).astype(int) % 2) == 1
    if start_active:
        on = ~on
    return on.astype(float)


# ---------------------------------------------------------------------------
# fMRI simulation
# ---------------------------------------------------------------------------

def _frame_period(seq: SequenceParams, protocol: FmriProtocol) -> float:
    if protocol.frame_period_s is not None:
        return float(protocol.frame_period_s)
    return seq.n_c * seq.tr_ms / 1000.0


def frame_off_resonance(f0_hz: float, protocol: FmriProtocol, frame_period_s: float) -> np.ndarray:
    """Per-frame center frequency with linear drift and respiration."""
    t = np.arange(protocol.task.size) * frame_period_s
    f = f0_hz + protocol.drift_hz_per_min * t / 60.0
    if protocol.resp_amp_hz and protocol.resp_period_s > 0:
        f = f + protocol.resp_amp_hz * np.sin(2 * math.pi * t / protocol.resp_period_s)
    return f


def calibrate_noise_scale(clean: np.ndarray, noise: np.ndarray, reference: np.ndarray,
                          target_tsnr_db: float) -> float:
    """Scale ``s`` such that ``clean + s*noise`` has the requested tSNR.

    ``clean`` and ``noise`` are ``(..., n_c, t_s)``; the tSNR is measured by
    :func:`ossi_kit.analysis.tsnr_map` on the 2-norm-combined series and
    averaged over leading axes.
    """
    from .analysis import combine_l2, tsnr_map

    def db(s):
        comb = combine_l2(clean + s * noise)
        t = tsnr_map(comb, reference)
        return 20 * np.log10(np.mean(t)) - target_tsnr_db

    if not np.any(clean):
        raise InvalidParameterError("cannot reach a tSNR target with a zero signal")
    base = db(0.0)
    if base <= 0:
        raise InvalidParameterError(
            f"signal fluctuations alone give {base + target_tsnr_db:.1f} dB, below the target")
    mu = float(np.mean(combine_l2(clean)))
    s_hi = mu / np.sqrt(np.mean(np.abs(noise) ** 2) * noise.shape[-2])
    s_hi *= 10 ** (-target_tsnr_db / 20.0)
    while db(s_hi) > 0:
        s_hi *= 2
    return float(optimize.brentq(db, 0.0, s_hi, xtol=1e-14 * s_hi, rtol=1e-12))


def simulate_fmri_voxel(seq: SequenceParams, voxel: VoxelParams, grid: IntegrationGrid | None,
                        protocol: FmriProtocol, sample_time=SampleTime.AT_TE,
                        return_clean: bool = False):
    """Simulate a voxel time course, shape ``(n_c, t_s)``.

    Per slow frame the voxel uses ``T2'(t) = T2' - dT2' * ref(t)`` with the
    HRF reference of the task, and ``f0(t)`` with drift and respiration.
    Complex white Gaussian noise is scaled so that the tSNR of the
    2-norm-combined series equals the protocol target exactly.
    """
    grid = grid or IntegrationGrid()
    dt = _frame_period(seq, protocol)
    ref = hrf_reference(protocol.task, dt)
    t2p = voxel.t2p_ms - protocol.delta_t2p_ms * ref
    if np.any(t2p <= 0):
        raise InvalidParameterError("activation drives T2' non-positive")
    f0 = frame_off_resonance(voxel.f0_hz, protocol, dt)
    cache = {}
    clean = np.empty((seq.n_c, protocol.task.size), dtype=complex)
    for k in range(protocol.task.size):
        key = (float(t2p[k]), float(f0[k]))
        if key not in cache:
            cache[key] = voxel_signal(seq, voxel.replace(t2p_ms=key[0], f0_hz=key[1]),
                                      grid, sample_time)
        clean[:, k] = cache[key]
    if not protocol.noisy:
        return (clean, clean) if return_clean else clean
    rng = np.random.default_rng(protocol.seed)
    noise = (rng.standard_normal(clean.shape) + 1j * rng.standard_normal(clean.shape)) / np.sqrt(2)
    s = calibrate_noise_scale(clean, noise, ref, protocol.target_tsnr_db)
    noisy = clean + s * noise
    return (noisy, clean) if return_clean else noisy


def percent_change(rest_cycle, active_cycle) -> float:
    """Percent decrease of the 2-norm-combined magnitude from rest to active."""
    r = np.linalg.norm(rest_cycle)
    if r == 0:
        raise InvalidParameterError("rest signal is zero")
    return 100.0 * (r - np.linalg.norm(active_cycle)) / r


def estimate_te_eff(seq: SequenceParams, voxel_rest: VoxelParams, voxel_active: VoxelParams,
                    grid: IntegrationGrid | None = None, sample_time=SampleTime.AT_TE) -> float:
    """Effective TE (ms) as fractional signal decrease over the R2' increase."""
    grid = grid or IntegrationGrid()
    if voxel_rest.replace(t2p_ms=voxel_active.t2p_ms) != voxel_active:
        raise InvalidParameterError("rest and active voxels may differ only in t2p_ms")
    d_r2p = 1.0 / voxel_active.t2p_ms - 1.0 / voxel_rest.t2p_ms
    if d_r2p == 0:
        raise InvalidParameterError("rest and active T2' are identical")
    rest = voxel_signal(seq, voxel_rest, grid, sample_time)
    active = voxel_signal(seq, voxel_active, grid, sample_time)
    return percent_change(rest, active) / 100.0 / d_r2p
