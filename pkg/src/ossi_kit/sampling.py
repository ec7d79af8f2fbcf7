"""Golden-angle rotation schedules, variable-density spirals and Cartesian
surrogate masks."""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError

__all__ = [
    "GOLDEN_ANGLE_DEG",
    "RotationMode",
    "RotationSchedule",
    "SpiralSpec",
    "SamplingSchedule",
    "StackOfSpirals",
    "rotation_angle",
    "vd_spiral",
    "radial_pitch",
    "uniform_spiral_samples",
    "spiral_acceleration",
    "spiral_schedule",
    "stack_of_spirals",
    "cartesian_vd_mask",
    "angular_coverage",
]

GOLDEN_ANGLE_DEG = 111.246


class RotationMode(str, enum.Enum):
    PROSPECTIVE = "prospective"
    RETROSPECTIVE = "retrospective"
    BASELINE = "baseline"


@dataclass(frozen=True)
class RotationSchedule:
    mode: RotationMode = RotationMode.PROSPECTIVE
    n_c: int = 10
    n_i: int = 9
    ga_deg: float = GOLDEN_ANGLE_DEG

    def __post_init__(self):
        object.__setattr__(self, "mode", RotationMode(self.mode))
        if self.n_c < 1 or self.n_i < 1:
            raise InvalidParameterError("n_c and n_i must be positive")
        if self.ga_deg != GOLDEN_ANGLE_DEG:
            raise InvalidParameterError("ga_deg is fixed to the golden angle")


def rotation_angle(k, sched: RotationSchedule):
    """Rotation (degrees, in [0, 360)) of acquisition frame ``k``.

    Frames are numbered with fast time varying fastest.
    """
    k = np.asarray(k, dtype=np.int64)
    if np.any(k < 0):
        raise InvalidParameterError("frame index must be non-negative")
    ga = sched.ga_deg
    if sched.mode is RotationMode.RETROSPECTIVE:
        a = ga * k + 2 * ga * (k // sched.n_c // sched.n_i)
    elif sched.mode is RotationMode.PROSPECTIVE:
        a = ga * k + ga * (k // sched.n_c)
    else:
        a = ga * k
    a = np.mod(a, 360.0)
    return float(a) if a.ndim == 0 else a


# ---------------------------------------------------------------------------
# spirals
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpiralSpec:
    """Variable-density spiral design (lengths in mm, dwell in us)."""

    n_i: int = 9
    a_mm: float = 310.0
    b_mm: float = 110.0
    d: int = 300
    fov_mm: float = 220.0
    matrix_n: int = 168
    dt_us: float = 4.0

    def __post_init__(self):
        if self.n_i < 1:
            raise InvalidParameterError("n_i must be at least 1")
        if not self.a_mm >= self.b_mm > 0:
            raise InvalidParameterError("need a_mm >= b_mm > 0")
        if self.d < 0:
            raise InvalidParameterError("d must be non-negative")
        if self.fov_mm <= 0 or self.matrix_n < 1:
            raise InvalidParameterError("fov_mm and matrix_n must be positive")

    @property
    def k_max(self) -> float:
        """Resolution radius in cycles/mm."""
        return self.matrix_n / (2.0 * self.fov_mm)

    @property
    def sample_spacing(self) -> float:
        """Readout sample spacing along the trajectory (cycles/mm)."""
        return 1.0 / self.fov_mm


def _effective_fov(kr, k_d, spec: SpiralSpec):
    kr = np.asarray(kr, float)
    span = max(spec.k_max - k_d, 1e-12)
    frac = np.clip((kr - k_d) / span, 0.0, 1.0)
    return np.where(kr <= k_d, spec.a_mm, spec.a_mm + (spec.b_mm - spec.a_mm) * frac)


def vd_spiral(spec: SpiralSpec) -> np.ndarray:
    """Single interleaf ``kx + 1j*ky`` in cycles/mm, starting at k = 0.

    The radius grows by ``n_i / F`` per turn, where the effective FOV ``F``
    equals ``a`` for the first ``d`` samples and then moves linearly from
    ``a`` to ``b`` with k-radius.  Samples are spaced ``1/fov`` apart along
    the curve; the last sample lands on the resolution radius.
    """
    if spec.a_mm < spec.fov_mm:
        warnings.warn("effective FOV at the center is below the prescribed FOV", stacklevel=2)
    ds = spec.sample_spacing
    kmax = spec.k_max
    # integrate r(theta) finely, then resample by arc length
    pts_r = [0.0]
    pts_t = [0.0]
    arc = [0.0]
    r, th, s = 0.0, 0.0, 0.0
    k_d = None
    dth = 2 * math.pi / 4096
    while r < kmax:
        if k_d is None and s >= spec.d * ds:
            k_d = r
        F = spec.a_mm if k_d is None else float(_effective_fov(r, k_d, spec))
        drdth = spec.n_i / (2 * math.pi * F)
        # midpoint step
        r_mid = r + 0.5 * dth * drdth
        F_mid = spec.a_mm if k_d is None else float(_effective_fov(r_mid, k_d, spec))
        dr = dth * spec.n_i / (2 * math.pi * F_mid)
        step = math.hypot(dr, r_mid * dth)
        r += dr
        th += dth
        s += step
        pts_r.append(r)
        pts_t.append(th)
        arc.append(s)
    arc = np.asarray(arc)
    pts_r = np.asarray(pts_r)
    pts_t = np.asarray(pts_t)
    # clip the last step onto the resolution radius
    frac = (kmax - pts_r[-2]) / (pts_r[-1] - pts_r[-2])
    arc[-1] = arc[-2] + frac * (arc[-1] - arc[-2])
    pts_t[-1] = pts_t[-2] + frac * (pts_t[-1] - pts_t[-2])
    pts_r[-1] = kmax
    n = int(math.ceil(arc[-1] / ds))
    s_new = np.append(np.arange(n) * ds, arc[-1])
    rr = np.interp(s_new, arc, pts_r)
    tt = np.interp(s_new, arc, pts_t)
    return rr * np.exp(1j * tt)


def radial_pitch(traj: np.ndarray, n_i: int = 1):
    """Radial spacing between consecutive turns of an interleaf pattern.

    Returns ``(radius, pitch)`` per completed turn, with the pitch divided
    by ``n_i`` so it measures spacing between neighbouring interleaves.
    """
    th = np.unwrap(np.angle(traj[1:]))
    th = np.concatenate([[th[0]], th])
    r = np.abs(traj)
    turns = np.arange(th[0], th[-1], 2 * math.pi)
    rt = np.interp(turns, th, r)
    return rt[1:], np.diff(rt) / n_i


def uniform_spiral_samples(spec: SpiralSpec) -> float:
    """Sample count of a Nyquist uniform-density spiral covering the disk."""
    return math.pi * (spec.matrix_n / 2.0) ** 2


def spiral_acceleration(spec: SpiralSpec, shots: int = 1) -> float:
    return uniform_spiral_samples(spec) / (shots * vd_spiral(spec).size)


def spiral_schedule(spec: SpiralSpec, rotation: RotationSchedule, t_s: int) -> "SamplingSchedule":
    """Per-frame rotated copies of one interleaf, in cycles per FOV."""
    base = vd_spiral(spec) * spec.fov_mm
    n_c = rotation.n_c
    k = np.arange(n_c * t_s).reshape(t_s, n_c).T
    ang = np.deg2rad(rotation_angle(k, rotation))
    traj = base[:, None, None] * np.exp(1j * ang)[None]
    return SamplingSchedule("spiral", traj=traj, acceleration=spiral_acceleration(spec),
                            meta={"mode": rotation.mode.value, "n_i": spec.n_i,
                                  "angles_deg": np.rad2deg(ang), "sector_deg": 360.0 / spec.n_i})


@dataclass
class StackOfSpirals:
    shots_per_plane: np.ndarray
    rotations_deg: np.ndarray       # (n_c, total shots) per slow frame 0
    acceleration: float
    order: list = field(default_factory=list)


def stack_of_spirals(n_z: int, sched: RotationSchedule, accel_2d: float | None = None,
                     spec: SpiralSpec | None = None, slow_frame: int = 0) -> StackOfSpirals:
    """Shot layout of a stack of spirals with doubled central planes.

    Plane ``i`` sits at ``kz = i - n_z//2``; the planes ``kz = -1`` and
    ``kz = 0`` get two shots, every other plane one.  The rotation index
    runs over fast time first, then shots along kz, then slow time.
    """
    if n_z < 3:
        raise InvalidParameterError("need at least 3 kz planes")
    shots = np.ones(n_z, dtype=int)
    shots[n_z // 2 - 1] = 2
    shots[n_z // 2] = 2
    total = int(shots.sum())
    order = [(i, s) for i in range(n_z) for s in range(shots[i])]
    n_c = sched.n_c
    k = (np.arange(n_c)[:, None] + n_c * (np.arange(total)[None, :] + total * slow_frame))
    rot = rotation_angle(k, sched)
    if accel_2d is None:
        accel_2d = spiral_acceleration(spec or SpiralSpec())
    return StackOfSpirals(shots, rot, n_z * accel_2d / total, order)


# ---------------------------------------------------------------------------
# Cartesian surrogate
# ---------------------------------------------------------------------------

@dataclass
class SamplingSchedule:
    """Per-frame sampling: boolean ``mask`` (ny, n_c, t_s) or ``traj``."""

    kind: str
    mask: np.ndarray | None = None
    traj: np.ndarray | None = None
    acceleration: float = 1.0
    meta: dict = field(default_factory=dict)

    @property
    def n_c(self):
        return (self.mask if self.mask is not None else self.traj).shape[-2]

    @property
    def t_s(self):
        return (self.mask if self.mask is not None else self.traj).shape[-1]

    def encoding_mask(self) -> np.ndarray:
        """Mask shaped ``(1, ny, n_c, t_s)`` for :class:`EncodingOp`."""
        if self.mask is None:
            raise InvalidParameterError("not a Cartesian schedule")
        return self.mask[None]


def cartesian_vd_mask(ny: int, accel: float, center_lines: int, seed: int, n_c: int, t_s: int,
                      power: float = 2.0, memory: int = 10) -> SamplingSchedule:
    """Random variable-density phase-encode masks, one per frame.

    Each frame keeps ``round(ny/accel)`` lines: the ``center_lines``
    central lines plus outer lines drawn without replacement with density
    ``(1 - |ky|/ky_max)**power``.  Lines used in the previous ``memory``
    slow frames at the same fast index are down-weighted, so consecutive
    slow frames complement each other.
    """
    if accel < 1:
        raise InvalidParameterError("accel must be at least 1")
    n_lines = int(round(ny / accel))
    if n_lines < center_lines or n_lines < 1:
        raise InvalidParameterError(
            f"accel {accel} leaves {n_lines} lines, fewer than {center_lines} center lines")
    mask = np.zeros((ny, n_c, t_s), dtype=bool)
    c0 = ny // 2 - center_lines // 2
    center = np.arange(c0, c0 + center_lines)
    outer = np.setdiff1d(np.arange(ny), center)
    ky = np.abs(np.arange(ny) - ny // 2) / max(ny // 2, 1)
    dens = np.clip(1.0 - ky, 0.0, None) ** power + 1e-2
    rng = np.random.default_rng(seed)
    n_rand = n_lines - center_lines
    for t in range(t_s):
        for n in range(n_c):
            mask[center, n, t] = True
            if n_rand <= 0:
                continue
            recent = mask[outer, n, max(0, t - memory):t].sum(axis=1)
            w = dens[outer] * 1e-4 ** recent
            pick = rng.choice(outer, size=n_rand, replace=False, p=w / w.sum())
            mask[pick, n, t] = True
    acc = mask.size / mask.sum()
    return SamplingSchedule("cartesian", mask=mask, acceleration=float(acc),
                            meta={"accel": accel, "seed": seed, "center_lines": center_lines})


def angular_coverage(sched: SamplingSchedule, window: int = 10) -> float:
    """Worst-case fraction of k-space directions visited in ``window`` slow frames.

    Coverage is measured at each fast-time index over ``window``
    consecutive slow frames and minimized over fast index and window
    position.  For spirals, a shot rotated by ``theta`` covers the 1-degree
    bins of its angular sector ``[theta - w/2, theta + w/2)`` with
    ``w = 360/n_i``; for Cartesian masks the bins are phase-encode lines.
    """
    if window < 1:
        raise InvalidParameterError("window must be at least 1")
    t_s = sched.t_s
    window = min(window, t_s)
    if sched.kind == "cartesian":
        hits = sched.mask                                    # (ny, n_c, t_s)
    else:
        ang = np.asarray(sched.meta["angles_deg"])           # (n_c, t_s)
        w = float(sched.meta.get("sector_deg", 1.0))
        bins = np.arange(360) + 0.5
        d = np.mod(bins[:, None, None] - ang[None] + w / 2, 360.0)
        hits = d < w
    best = 1.0
    for t in range(t_s - window + 1):
        cov = hits[:, :, t:t + window].any(axis=2).mean(axis=0)
        best = min(best, float(cov.min()))
    return best
