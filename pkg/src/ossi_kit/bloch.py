"""Hard-pulse Bloch simulation of oscillating and spoiled steady states.

Conventions
-----------
* Free precession multiplies the transverse magnetization by
  ``exp(-t/T2) * exp(-2j*pi*f0*t)``.
* An RF pulse of phase ``phi`` tips +z onto ``exp(-1j*phi)`` in the
  transverse plane (rotation axis at ``-phi - 90deg``), and the receiver
  demodulates sample ``n`` by ``exp(+1j*phi(n))``.  With this pairing a
  frequency shift of ``1/(n_c*TR)`` delays the cycle by exactly one TR.
* RF phase of pulse ``n`` is ``pi*n**2/n_c + psi_b*n``.
* Sample ``n`` of a cycle belongs to TR ``n``; ``post_rf`` is taken just
  after pulse ``n``, ``at_te`` at TE, ``pre_rf`` at the end of the TR
  (before spoiling, if any).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numba
import numpy as np

from .errors import ConvergenceError, InvalidParameterError

__all__ = [
    "GradientMode",
    "SampleTime",
    "SequenceParams",
    "Isochromat",
    "SignalCycle",
    "quadratic_phase",
    "rf_phases",
    "simulate_isochromat",
    "steady_state_cycles",
    "spoiled_gre_signal",
    "ernst_angle",
    "frequency_response",
    "duality_deviation",
    "phase_spread",
]

# relative distance to the periodic orbit that defines "steady state"
STEADY_TOL = 1e-10
_ROUNDOFF = 64 * np.finfo(float).eps


class GradientMode(str, enum.Enum):
    BALANCED = "balanced"
    SPOILED = "spoiled"


class SampleTime(str, enum.Enum):
    AT_TE = "at_te"
    POST_RF = "post_rf"
    PRE_RF = "pre_rf"


@dataclass(frozen=True)
class SequenceParams:
    """OSSI / GRE sequence timing and RF settings (times in ms)."""

    tr_ms: float = 15.0
    te_ms: float = 2.7
    n_c: int = 10
    flip_deg: float = 10.0
    psi_b_deg: float = 0.0
    gradient_mode: GradientMode = GradientMode.BALANCED

    def __post_init__(self):
        object.__setattr__(self, "gradient_mode", GradientMode(self.gradient_mode))
        if not self.tr_ms > 0:
            raise InvalidParameterError(f"tr_ms must be positive, got {self.tr_ms}")
        if not 0 <= self.flip_deg <= 90:
            raise InvalidParameterError(f"flip_deg must be in [0, 90], got {self.flip_deg}")
        if int(self.n_c) != self.n_c or self.n_c < 1:
            raise InvalidParameterError(f"n_c must be a positive integer, got {self.n_c}")
        if not 0 <= self.te_ms < self.tr_ms:
            raise InvalidParameterError(
                f"te_ms must satisfy 0 <= te < tr, got te={self.te_ms}, tr={self.tr_ms}")

    @property
    def psi_a(self) -> float:
        """Quadratic phase increment 2*pi/n_c (radians)."""
        return 2.0 * math.pi / self.n_c

    @property
    def t_ossi_ms(self) -> float:
        return self.n_c * self.tr_ms

    @property
    def delta_f_hz(self) -> float:
        """Frequency shift that delays the cycle by one TR."""
        return 1000.0 / (self.n_c * self.tr_ms)

    def replace(self, **changes) -> "SequenceParams":
        fields = dict(tr_ms=self.tr_ms, te_ms=self.te_ms, n_c=self.n_c,
                      flip_deg=self.flip_deg, psi_b_deg=self.psi_b_deg,
                      gradient_mode=self.gradient_mode)
        fields.update(changes)
        return SequenceParams(**fields)


@dataclass(frozen=True)
class Isochromat:
    t1_ms: float
    t2_ms: float
    f0_hz: float = 0.0
    m0: complex = 1.0

    def __post_init__(self):
        if not (self.t2_ms > 0 and self.t1_ms >= self.t2_ms):
            raise InvalidParameterError(
                f"need t1 >= t2 > 0, got t1={self.t1_ms}, t2={self.t2_ms}")


@dataclass
class SignalCycle:
    samples: np.ndarray
    sample_time: SampleTime = SampleTime.AT_TE

    def __len__(self):
        return len(self.samples)


def quadratic_phase(n, n_c):
    """RF phase ``pi*n**2/n_c`` reduced to [0, 2*pi).

    Integer arithmetic keeps the reduction exact for large ``n``.
    """
    if n_c == 0:
        raise InvalidParameterError("n_c must be nonzero")
    if n_c < 0:
        raise InvalidParameterError(f"n_c must be positive, got {n_c}")
    n = np.asarray(n)
    if np.any(n < 0):
        raise InvalidParameterError("RF index must be non-negative")
    r = np.mod(n.astype(np.int64) ** 2, 2 * n_c)
    out = math.pi * r / n_c
    return float(out) if out.ndim == 0 else out


def rf_phases(seq: SequenceParams, n) -> np.ndarray:
    """RF phase of pulse(s) ``n`` including the linear ``psi_b`` term."""
    n = np.asarray(n, dtype=np.int64)
    psi_b = math.radians(seq.psi_b_deg)
    return np.mod(quadratic_phase(n, seq.n_c) + psi_b * n, 2 * math.pi)


def _cycle_advance(seq: SequenceParams) -> float:
    # phi(n + n_c) - phi(n), mod 2*pi
    return math.fmod(math.pi * seq.n_c + math.radians(seq.psi_b_deg) * seq.n_c, 2 * math.pi)


def _sample_offset(seq: SequenceParams, sample_time: SampleTime) -> float:
    sample_time = SampleTime(sample_time)
    if sample_time is SampleTime.POST_RF:
        return 0.0
    if sample_time is SampleTime.PRE_RF:
        return seq.tr_ms
    return seq.te_ms


# ---------------------------------------------------------------------------
# time stepping
# ---------------------------------------------------------------------------

def simulate_isochromat(seq: SequenceParams, iso: Isochromat, burn_in_t1_multiples: float = 5.0,
                        sample_time=SampleTime.AT_TE, tol: float = STEADY_TOL,
                        max_t1_multiples: float = 200.0, return_info: bool = False):
    """Step the Bloch equations TR by TR until the cycle repeats.

    Starts from equilibrium, runs at least ``burn_in_t1_multiples * T1`` of
    burn-in, then keeps going one cycle at a time until the distance to the
    periodic orbit, extrapolated from the geometric decay of consecutive
    cycle differences, is below ``tol`` relative to the cycle's peak.

    Raises
    ------
    ConvergenceError
        If the cycle has not settled after ``max_t1_multiples * T1``.
    """
    if burn_in_t1_multiples < 5:
        raise InvalidParameterError("burn-in must cover at least 5 T1")
    n_c = seq.n_c
    tr, te = seq.tr_ms, seq.te_ms
    t_s = _sample_offset(seq, sample_time)
    alpha = math.radians(seq.flip_deg)
    ca, sa = math.cos(alpha), math.sin(alpha)
    spoiled = seq.gradient_mode is GradientMode.SPOILED
    t1, t2, f0 = iso.t1_ms, iso.t2_ms, iso.f0_hz

    def prec(t):
        return math.exp(-t / t2) * complex(math.cos(2 * math.pi * f0 * t / 1000.0),
                                           -math.sin(2 * math.pi * f0 * t / 1000.0))

    p_s, p_rest = prec(t_s), prec(tr - t_s)
    e1_s, e1_rest = math.exp(-t_s / t1), math.exp(-(tr - t_s) / t1)

    n_min = int(math.ceil(burn_in_t1_multiples * t1 / tr))
    n_min = n_c * int(math.ceil(n_min / n_c))
    n_max = n_c * int(math.ceil(max_t1_multiples * t1 / tr / n_c))

    psi_b = math.radians(seq.psi_b_deg)
    phase_lut = [math.pi * r / n_c for r in range(2 * n_c)]

    mxy, mz = 0j, 1.0
    max_norm = 1.0
    prev = None
    prev_diff = None
    cycle = np.empty(n_c, dtype=complex)
    n = 0
    residual = np.inf
    while True:
        for k in range(n_c):
            phi = math.fmod(phase_lut[(n * n) % (2 * n_c)] + psi_b * n, 2 * math.pi)
            rot = complex(math.cos(phi), math.sin(phi))
            w = mxy * rot
            x = w.real * ca + mz * sa
            mz = -w.real * sa + mz * ca
            mxy = complex(x, w.imag) / rot
            m_s = mxy * p_s
            mz_s = mz * e1_s + (1.0 - e1_s)
            cycle[k] = m_s * rot
            max_norm = max(max_norm, abs(m_s) ** 2 + mz_s ** 2, abs(mxy) ** 2 + mz ** 2)
            mxy = m_s * p_rest
            mz = mz_s * e1_rest + (1.0 - e1_rest)
            max_norm = max(max_norm, abs(mxy) ** 2 + mz ** 2)
            if spoiled:
                mxy = 0j
            n += 1
        if n >= n_min:
            if prev is not None:
                scale = max(np.max(np.abs(cycle)), 1e-300)
                diff = float(np.max(np.abs(cycle - prev)) / scale)
                if not np.any(cycle) or diff <= _ROUNDOFF:
                    # at round-off level the decay rate can no longer be estimated
                    residual = diff
                    break
                if prev_diff is not None and diff < prev_diff:
                    rate = diff / prev_diff
                    residual = diff / (1.0 - rate)
                    if residual < tol:
                        break
                prev_diff = diff
            prev = cycle.copy()
        if n >= n_max:
            raise ConvergenceError(
                f"no steady state after {n} TRs (residual {residual:.3g})", residual=residual)
    out = SignalCycle(cycle * iso.m0, SampleTime(sample_time))
    if return_info:
        return out, {"n_tr": n, "residual": residual, "max_norm": math.sqrt(max_norm)}
    return out


# ---------------------------------------------------------------------------
# direct fixed point of the cycle map
# ---------------------------------------------------------------------------

@numba.njit(cache=True)
def _steady_kernel(freqs, t1, t2, tr, t_s, alpha, phases, advance, spoiled, out):
    n_c = phases.shape[0]
    ca = math.cos(alpha)
    sa = math.sin(alpha)
    e2s = math.exp(-t_s / t2)
    e2r = math.exp(-(tr - t_s) / t2)
    e1s = math.exp(-t_s / t1)
    e1r = math.exp(-(tr - t_s) / t1)
    e1 = e1s * e1r
    A = np.empty((3, 3))
    B = np.empty((3, 3))
    b = np.empty(3)
    M = np.empty((3, 3))
    for q in range(freqs.shape[0]):
        th = 2.0 * math.pi * freqs[q] * tr / 1000.0
        ct = math.cos(th)
        st = math.sin(th)
        # cycle map v -> A v + b, starting just before pulse 0
        for i in range(3):
            for j in range(3):
                A[i, j] = 1.0 if i == j else 0.0
            b[i] = 0.0
        for n in range(n_c):
            cp = math.cos(phases[n])
            sp = math.sin(phases[n])
            # R = Rz(-phi) Ry(alpha) Rz(phi)
            M[0, 0] = cp * ca * cp + sp * sp
            M[0, 1] = -cp * ca * sp + sp * cp
            M[0, 2] = cp * sa
            M[1, 0] = -sp * ca * cp + cp * sp
            M[1, 1] = sp * ca * sp + cp * cp
            M[1, 2] = -sp * sa
            M[2, 0] = -sa * cp
            M[2, 1] = sa * sp
            M[2, 2] = ca
            # free precession over one TR: rotate by -th, relax
            e2 = 0.0 if spoiled else e2s * e2r
            P00 = e2 * ct
            P01 = e2 * st
            P10 = -e2 * st
            P11 = e2 * ct
            # B = P R
            for j in range(3):
                B[0, j] = P00 * M[0, j] + P01 * M[1, j]
                B[1, j] = P10 * M[0, j] + P11 * M[1, j]
                B[2, j] = e1 * M[2, j]
            # A <- B A ; b <- B b + (0, 0, 1 - e1)
            for j in range(3):
                a0 = A[0, j]
                a1 = A[1, j]
                a2 = A[2, j]
                A[0, j] = B[0, 0] * a0 + B[0, 1] * a1 + B[0, 2] * a2
                A[1, j] = B[1, 0] * a0 + B[1, 1] * a1 + B[1, 2] * a2
                A[2, j] = B[2, 0] * a0 + B[2, 1] * a1 + B[2, 2] * a2
            b0 = b[0]
            b1 = b[1]
            b2 = b[2]
            b[0] = B[0, 0] * b0 + B[0, 1] * b1 + B[0, 2] * b2
            b[1] = B[1, 0] * b0 + B[1, 1] * b1 + B[1, 2] * b2
            b[2] = B[2, 0] * b0 + B[2, 1] * b1 + B[2, 2] * b2 + (1.0 - e1)
        # solve v = Rz(advance) (A v + b)
        cd = math.cos(advance)
        sd = math.sin(advance)
        for j in range(3):
            r0 = cd * A[0, j] - sd * A[1, j]
            r1 = sd * A[0, j] + cd * A[1, j]
            M[0, j] = (1.0 if j == 0 else 0.0) - r0
            M[1, j] = (1.0 if j == 1 else 0.0) - r1
            M[2, j] = (1.0 if j == 2 else 0.0) - A[2, j]
        rhs0 = cd * b[0] - sd * b[1]
        rhs1 = sd * b[0] + cd * b[1]
        rhs2 = b[2]
        det = (M[0, 0] * (M[1, 1] * M[2, 2] - M[1, 2] * M[2, 1])
               - M[0, 1] * (M[1, 0] * M[2, 2] - M[1, 2] * M[2, 0])
               + M[0, 2] * (M[1, 0] * M[2, 1] - M[1, 1] * M[2, 0]))
        x = (rhs0 * (M[1, 1] * M[2, 2] - M[1, 2] * M[2, 1])
             - M[0, 1] * (rhs1 * M[2, 2] - M[1, 2] * rhs2)
             + M[0, 2] * (rhs1 * M[2, 1] - M[1, 1] * rhs2)) / det
        y = (M[0, 0] * (rhs1 * M[2, 2] - M[1, 2] * rhs2)
             - rhs0 * (M[1, 0] * M[2, 2] - M[1, 2] * M[2, 0])
             + M[0, 2] * (M[1, 0] * rhs2 - rhs1 * M[2, 0])) / det
        z = (M[0, 0] * (M[1, 1] * rhs2 - rhs1 * M[2, 1])
             - M[0, 1] * (M[1, 0] * rhs2 - rhs1 * M[2, 0])
             + rhs0 * (M[1, 0] * M[2, 1] - M[1, 1] * M[2, 0])) / det
        # roll out one cycle
        cs = math.cos(2.0 * math.pi * freqs[q] * t_s / 1000.0)
        ss = math.sin(2.0 * math.pi * freqs[q] * t_s / 1000.0)
        cr = math.cos(2.0 * math.pi * freqs[q] * (tr - t_s) / 1000.0)
        sr = math.sin(2.0 * math.pi * freqs[q] * (tr - t_s) / 1000.0)
        for n in range(n_c):
            cp = math.cos(phases[n])
            sp = math.sin(phases[n])
            # rotate into the pulse frame, tip, rotate back
            wx = x * cp - y * sp
            wy = x * sp + y * cp
            nx = wx * ca + z * sa
            z = -wx * sa + z * ca
            x = nx * cp + wy * sp
            y = -nx * sp + wy * cp
            # to the sample time
            sx = e2s * (x * cs + y * ss)
            sy = e2s * (-x * ss + y * cs)
            z = z * e1s + (1.0 - e1s)
            # demodulate by exp(+i phi)
            out[q, n] = complex(sx * cp - sy * sp, sx * sp + sy * cp)
            if spoiled:
                x = 0.0
                y = 0.0
            else:
                x = e2r * (sx * cr + sy * sr)
                y = e2r * (-sx * sr + sy * cr)
            z = z * e1r + (1.0 - e1r)


def steady_state_cycles(seq: SequenceParams, t1_ms: float, t2_ms: float, freqs_hz,
                        sample_time=SampleTime.AT_TE) -> np.ndarray:
    """Steady-state cycles for many off-resonance frequencies at once.

    Solves for the fixed point of the one-cycle affine map instead of
    stepping through burn-in; agrees with :func:`simulate_isochromat` to its
    convergence tolerance.  Returns an array ``(len(freqs), n_c)`` for unit
    equilibrium magnetization.
    """
    if not (t2_ms > 0 and t1_ms >= t2_ms):
        raise InvalidParameterError(f"need t1 >= t2 > 0, got t1={t1_ms}, t2={t2_ms}")
    freqs = np.ascontiguousarray(np.atleast_1d(np.asarray(freqs_hz, dtype=np.float64)).ravel())
    out = np.empty((freqs.size, seq.n_c), dtype=np.complex128)
    phases = np.ascontiguousarray(rf_phases(seq, np.arange(seq.n_c)), dtype=np.float64)
    _steady_kernel(freqs, float(t1_ms), float(t2_ms), float(seq.tr_ms),
                   _sample_offset(seq, sample_time), math.radians(seq.flip_deg), phases,
                   _cycle_advance(seq), seq.gradient_mode is GradientMode.SPOILED, out)
    return out


def spoiled_gre_signal(seq: SequenceParams, iso: Isochromat) -> complex:
    """Analytic ideally-spoiled GRE steady state at TE."""
    if seq.gradient_mode is not GradientMode.SPOILED:
        raise InvalidParameterError("spoiled_gre_signal needs gradient_mode='spoiled'")
    a = math.radians(seq.flip_deg)
    e1 = math.exp(-seq.tr_ms / iso.t1_ms)
    mag = math.sin(a) * (1 - e1) / (1 - e1 * math.cos(a)) * math.exp(-seq.te_ms / iso.t2_ms)
    return iso.m0 * mag * complex(math.cos(2 * math.pi * iso.f0_hz * seq.te_ms / 1000.0),
                                  -math.sin(2 * math.pi * iso.f0_hz * seq.te_ms / 1000.0))


def ernst_angle(tr_ms: float, t1_ms: float) -> float:
    """Flip angle (degrees) maximizing spoiled-GRE signal."""
    if not (tr_ms > 0 and t1_ms > 0):
        raise InvalidParameterError("tr_ms and t1_ms must be positive")
    return math.degrees(math.acos(math.exp(-tr_ms / t1_ms)))


def frequency_response(seq: SequenceParams, f0_grid, iso_base: Isochromat,
                       sample_time=SampleTime.AT_TE, method: str = "fixed_point") -> np.ndarray:
    """Steady-state cycles of ``iso_base`` moved to every frequency in ``f0_grid``.

    ``method="simulate"`` runs :func:`simulate_isochromat` per frequency
    (slow, used as a cross-check).  Returns ``(len(f0_grid), n_c)``.
    """
    f0_grid = np.atleast_1d(np.asarray(f0_grid, dtype=float))
    if method == "fixed_point":
        out = steady_state_cycles(seq, iso_base.t1_ms, iso_base.t2_ms, f0_grid, sample_time)
        return out * iso_base.m0
    if method == "simulate":
        rows = [simulate_isochromat(seq, Isochromat(iso_base.t1_ms, iso_base.t2_ms, f, iso_base.m0),
                                    sample_time=sample_time).samples for f in f0_grid]
        return np.array(rows)
    raise InvalidParameterError(f"unknown method {method!r}")


def duality_deviation(seq: SequenceParams, iso: Isochromat, f0_list,
                      sample_time=SampleTime.POST_RF, index: int = 1) -> float:
    """Largest relative mismatch between time cycles and frequency samples.

    Compares ``M_T(k; f0)`` with ``M_F(f0 + (index - k)/(n_c*TR))`` where
    ``M_F`` is the response at fast-time sample ``index``.  Off the
    ``post_rf`` sample the two sides differ by the precession phase
    accumulated up to the sample time, which is removed here.
    """
    df = seq.delta_f_hz
    t_s = _sample_offset(seq, sample_time)
    worst = 0.0
    for f0 in np.atleast_1d(f0_list):
        t_cycle = steady_state_cycles(seq, iso.t1_ms, iso.t2_ms, [f0], sample_time)[0]
        k = np.arange(seq.n_c)
        shifts = index - k
        freqs = f0 + shifts * df
        f_samples = steady_state_cycles(seq, iso.t1_ms, iso.t2_ms, freqs, sample_time)[:, index]
        f_samples = f_samples * np.exp(2j * np.pi * shifts * df * t_s / 1000.0)
        scale = np.max(np.abs(t_cycle))
        worst = max(worst, float(np.max(np.abs(t_cycle - f_samples)) / scale))
    return worst


def phase_spread(seq: SequenceParams, t1_ms: float, t2_ms: float, f_center_hz: float,
                 span_hz: float, n_iso: int = 401, sample_time=SampleTime.AT_TE) -> np.ndarray:
    """Phase range (degrees) across isochromats for every fast-time sample.

    Isochromats are spread uniformly over ``f_center +- span/2``; phases are
    unwrapped along frequency before taking max minus min.
    """
    freqs = np.linspace(f_center_hz - span_hz / 2, f_center_hz + span_hz / 2, n_iso)
    cyc = steady_state_cycles(seq, t1_ms, t2_ms, freqs, sample_time)
    ph = np.unwrap(np.angle(cyc), axis=0)
    return np.degrees(ph.max(axis=0) - ph.min(axis=0))
