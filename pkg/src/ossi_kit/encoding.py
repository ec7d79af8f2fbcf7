"""Multi-coil encoding operators: masked Cartesian FFT and Kaiser-Bessel NUFFT.

Image series are ``(nx, ny, n_c, t_s)``.  Cartesian k-space is stored
zero-filled as ``(n_coil, nx, ny, n_c, t_s)`` with a boolean sampling mask
broadcastable to ``(nx, ny, n_c, t_s)``; non-uniform k-space is
``(n_coil, n_samp, n_c, t_s)`` with trajectories ``(n_samp, n_c, t_s)``
in cycles per FOV (complex ``kx + 1j*ky``).

Both paths use the unitary DFT convention
``y(k) = N**-0.5 * sum_n x[n] exp(-2j*pi*k.n/N)`` with ``n`` centered.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft
import scipy.sparse as sp
from scipy import special

from .errors import DimensionMismatchError, InvalidParameterError

__all__ = [
    "CoilMaps",
    "EncodingOp",
    "NufftPlan",
    "kaiser_bessel_beta",
    "centered_fft2",
    "centered_ifft2",
    "nonuniform_forward",
    "nonuniform_adjoint",
    "direct_dft",
    "operator_norm",
    "dot_test",
]


def _centered(x, axes, inverse):
    """Centered orthonormal DFT along ``axes``.

    Even lengths use the checkerboard identity
    ``fftshift(fft(ifftshift(x))) = (-1)**(k + N/2) * fft((-1)**n * x)``
    instead of two array rolls.
    """
    axes = tuple(a % x.ndim for a in axes)
    odd = tuple(a for a in axes if x.shape[a] % 2)
    even = [a for a in axes if x.shape[a] % 2 == 0]
    if odd:
        x = sfft.ifftshift(x, axes=odd)
    pre = None
    gsign = 1.0
    for a in even:
        n = x.shape[a]
        shape = [1] * x.ndim
        shape[a] = n
        c = (1.0 - 2.0 * (np.arange(n) % 2)).reshape(shape)
        pre = c if pre is None else pre * c
        gsign *= (-1.0) ** (n // 2)
    if pre is not None:
        x = x * (pre * gsign)
    fn = sfft.ifftn if inverse else sfft.fftn
    y = fn(x, axes=axes, norm="ortho")
    if pre is not None:
        y *= pre
    if odd:
        y = sfft.fftshift(y, axes=odd)
    return y


def centered_fft2(x, axes=(-2, -1)):
    """Orthonormal DFT with the zero frequency in the array center."""
    return _centered(np.asarray(x), axes, False)


def centered_ifft2(k, axes=(-2, -1)):
    return _centered(np.asarray(k), axes, True)


@dataclass
class CoilMaps:
    maps: np.ndarray      # (n_coil, nx, ny)
    mask: np.ndarray      # (nx, ny) bool

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=complex)
        if self.maps.ndim == 2:
            self.maps = self.maps[None]
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.maps.shape[1:] != self.mask.shape:
            raise DimensionMismatchError(
                f"maps {self.maps.shape[1:]} and mask {self.mask.shape} differ")

    @property
    def n_coil(self) -> int:
        return self.maps.shape[0]

    @classmethod
    def ones(cls, nx: int, ny: int) -> "CoilMaps":
        return cls(np.ones((1, nx, ny), complex), np.ones((nx, ny), bool))

    def sos(self) -> np.ndarray:
        return np.sqrt(np.sum(np.abs(self.maps) ** 2, axis=0))


# ---------------------------------------------------------------------------
# Kaiser-Bessel gridding NUFFT
# ---------------------------------------------------------------------------

def kaiser_bessel_beta(width: int = 5, oversampling: float = 2.0) -> float:
    """Standard KB shape parameter for a given width and oversampling."""
    a = oversampling
    return math.pi * math.sqrt((width / a) ** 2 * (a - 0.5) ** 2 - 0.8)


def _kb_kernel(u, width, beta):
    u = np.asarray(u, dtype=float)
    arg = 1.0 - (2.0 * u / width) ** 2
    out = np.zeros_like(u)
    ok = arg >= 0
    out[ok] = special.i0(beta * np.sqrt(arg[ok]))
    return out


def _kb_ft(nu, width, beta):
    """Continuous Fourier transform of the KB kernel at frequency ``nu``."""
    z = np.sqrt((beta ** 2 - (math.pi * width * np.asarray(nu, float)) ** 2).astype(complex))
    return np.real(width * np.sinh(z) / z)


class NufftPlan:
    """Precomputed 2D gridding NUFFT for one trajectory.

    ``traj`` holds ``kx + 1j*ky`` in cycles per FOV, each within the
    oversampled grid's Nyquist range ``|k_d| <= N_d``.
    """

    def __init__(self, shape, traj, width: int = 5, oversampling: float = 2.0):
        self.shape = tuple(int(s) for s in shape)
        if len(self.shape) != 2:
            raise DimensionMismatchError("NUFFT supports 2D images")
        traj = np.asarray(traj, dtype=complex).ravel()
        N = np.array(self.shape)
        kx, ky = traj.real, traj.imag
        if np.any(np.abs(kx) > N[0]) or np.any(np.abs(ky) > N[1]):
            raise InvalidParameterError("trajectory outside the oversampled grid")
        self.width = int(width)
        self.oversampling = float(oversampling)
        self.beta = kaiser_bessel_beta(width, oversampling)
        self.grid = tuple(int(round(oversampling * n)) for n in self.shape)
        K = np.array(self.grid)
        self.n_samples = traj.size
        # apodization correction over centered image indices
        apod = []
        for d in range(2):
            n = np.arange(self.shape[d]) - self.shape[d] // 2
            apod.append(_kb_ft(n / K[d], width, self.beta))
        self.apod = 1.0 / np.outer(apod[0], apod[1])
        # interpolation weights: grid value at m weighted by psi(kappa - m)
        rows, cols, vals = [], [], []
        per_dim = []
        for d, k in enumerate((kx, ky)):
            kappa = k * K[d] / N[d]
            m0 = np.ceil(kappa - width / 2.0).astype(np.int64)
            m = m0[:, None] + np.arange(width)[None, :]
            w = _kb_kernel(kappa[:, None] - m, width, self.beta)
            per_dim.append((np.mod(m, K[d]), w))
        (mx, wx), (my, wy) = per_dim
        idx = (mx[:, :, None] * K[1] + my[:, None, :]).reshape(traj.size, -1)
        w = (wx[:, :, None] * wy[:, None, :]).reshape(traj.size, -1)
        rows = np.repeat(np.arange(traj.size), width * width)
        self.interp = sp.csr_matrix((w.ravel(), (rows, idx.ravel())),
                                    shape=(traj.size, int(K[0] * K[1])))
        self.interp.sum_duplicates()
        self.interp_h = self.interp.conj().T.tocsr()
        self.norm = 1.0 / math.sqrt(N[0] * N[1])
        # image index n sits at grid index n mod K
        self._rows = np.mod(np.arange(self.shape[0]) - self.shape[0] // 2, K[0])
        self._cols = np.mod(np.arange(self.shape[1]) - self.shape[1] // 2, K[1])

    def forward(self, x):
        """``x`` is ``(..., nx, ny)``; returns ``(..., n_samples)``."""
        x = np.asarray(x)
        lead = x.shape[:-2]
        xs = (x * self.apod).reshape((-1,) + self.shape)
        g = np.zeros((xs.shape[0],) + self.grid, dtype=complex)
        g[:, self._rows[:, None], self._cols[None, :]] = xs
        G = sfft.fft2(g, axes=(1, 2)).reshape(xs.shape[0], -1)
        y = (self.interp @ G.T).T * self.norm
        return y.reshape(lead + (self.n_samples,))

    def adjoint(self, y):
        y = np.asarray(y)
        lead = y.shape[:-1]
        ys = y.reshape(-1, self.n_samples)
        G = (self.interp_h @ ys.T).T.reshape((ys.shape[0],) + self.grid)
        g = sfft.ifft2(G, axes=(1, 2)) * (self.grid[0] * self.grid[1])
        x = g[:, self._rows[:, None], self._cols[None, :]] * self.apod * self.norm
        return x.reshape(lead + self.shape)


def nonuniform_forward(image, trajectory, width: int = 5, oversampling: float = 2.0):
    """One-off NUFFT of a 2D image at ``trajectory`` (cycles per FOV)."""
    image = np.asarray(image)
    return NufftPlan(image.shape[-2:], trajectory, width, oversampling).forward(image)


def nonuniform_adjoint(samples, trajectory, shape, width: int = 5, oversampling: float = 2.0):
    return NufftPlan(shape, trajectory, width, oversampling).adjoint(samples)


def direct_dft(image, trajectory):
    """Exact non-uniform DFT under the same convention (for testing)."""
    image = np.asarray(image)
    nx, ny = image.shape[-2:]
    n1 = np.arange(nx) - nx // 2
    n2 = np.arange(ny) - ny // 2
    k = np.asarray(trajectory).ravel()
    Ex = np.exp(-2j * np.pi * np.outer(k.real, n1) / nx)
    Ey = np.exp(-2j * np.pi * np.outer(k.imag, n2) / ny)
    return np.einsum("mi,mj,...ij->...m", Ex, Ey, image) / math.sqrt(nx * ny)


def _to_frames_first(a):
    """``(..., nx, ny, n_c, t_s)`` -> contiguous ``(..., n_c, t_s, nx, ny)``."""
    return np.ascontiguousarray(np.moveaxis(a, (-4, -3), (-2, -1)))


def _from_frames_first(a):
    return np.moveaxis(a, (-2, -1), (-4, -3))


# ---------------------------------------------------------------------------
# encoding operator
# ---------------------------------------------------------------------------

@dataclass
class EncodingOp:
    """Coil sensitivities times Fourier sampling, with exact adjoint.

    Exactly one of ``mask`` (Cartesian) or ``traj`` (non-uniform) is set.
    ``scale`` multiplies the whole operator.
    """

    coils: CoilMaps
    n_c: int
    t_s: int
    mask: np.ndarray | None = None
    traj: np.ndarray | None = None
    width: int = 5
    oversampling: float = 2.0
    scale: float = 1.0
    _plans: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if (self.mask is None) == (self.traj is None):
            raise InvalidParameterError("give exactly one of mask or traj")
        nx, ny = self.coils.maps.shape[1:]
        if self.mask is not None:
            m = np.asarray(self.mask, dtype=bool)
            if m.ndim != 4:
                raise DimensionMismatchError("Cartesian mask must be 4D (nx|1, ny, n_c, t_s)")
            try:
                np.broadcast_shapes(m.shape, (nx, ny, self.n_c, self.t_s))
            except ValueError as exc:
                raise DimensionMismatchError(
                    f"mask {m.shape} does not fit image {(nx, ny, self.n_c, self.t_s)}") from exc
            self.mask = m
        else:
            t = np.asarray(self.traj, dtype=complex)
            if t.ndim != 3 or t.shape[1:] != (self.n_c, self.t_s):
                raise DimensionMismatchError(
                    f"trajectory {t.shape} does not fit frames {(self.n_c, self.t_s)}")
            self.traj = t

    @property
    def mode(self) -> str:
        return "cartesian" if self.mask is not None else "nonuniform"

    @property
    def image_shape(self):
        nx, ny = self.coils.maps.shape[1:]
        return (nx, ny, self.n_c, self.t_s)

    @property
    def data_shape(self):
        nc = self.coils.n_coil
        if self.mode == "cartesian":
            return (nc,) + self.image_shape
        return (nc, self.traj.shape[0], self.n_c, self.t_s)

    def scaled(self, factor: float) -> "EncodingOp":
        return EncodingOp(self.coils, self.n_c, self.t_s, self.mask, self.traj, self.width,
                          self.oversampling, self.scale * factor, self._plans)

    def subset(self, slow) -> "EncodingOp":
        """Operator restricted to slow frames ``slow`` (a slice)."""
        if not isinstance(slow, slice):
            raise InvalidParameterError("subset takes a slice of slow frames")
        t_s = len(range(*slow.indices(self.t_s)))
        if self.mode == "cartesian":
            m = self.mask if self.mask.shape[3] == 1 else self.mask[..., slow]
            return EncodingOp(self.coils, self.n_c, t_s, mask=m, scale=self.scale)
        return EncodingOp(self.coils, self.n_c, t_s, traj=self.traj[..., slow], width=self.width,
                          oversampling=self.oversampling, scale=self.scale)

    def _check(self, arr, shape, what):
        if arr.shape != tuple(shape):
            raise DimensionMismatchError(f"{what} has shape {arr.shape}, expected {tuple(shape)}")

    def _plan(self, n, t):
        key = (n, t)
        if key not in self._plans:
            self._plans[key] = NufftPlan(self.coils.maps.shape[1:], self.traj[:, n, t],
                                         self.width, self.oversampling)
        return self._plans[key]

    def forward(self, x):
        x = np.asarray(x)
        self._check(x, self.image_shape, "image")
        if self.mode == "cartesian":
            k = centered_fft2(self._coil_images(x), axes=(-2, -1))
            return self.scale * _from_frames_first(k) * self.mask[None]
        S = self.coils.maps[:, :, :, None, None]
        cx = S * x[None]
        y = np.empty(self.data_shape, dtype=complex)
        for n in range(self.n_c):
            for t in range(self.t_s):
                y[:, :, n, t] = self._plan(n, t).forward(cx[:, :, :, n, t])
        return self.scale * y

    def adjoint(self, y, weights=None):
        """Exact adjoint; optional ``weights`` multiply the data first."""
        y = np.asarray(y)
        self._check(y, self.data_shape, "k-space")
        if weights is not None:
            y = y * weights
        if self.mode == "cartesian":
            k = _to_frames_first(y * self.mask[None])
            return self.scale * self._coil_combine(centered_ifft2(k, axes=(-2, -1)))
        S = self.coils.maps[:, :, :, None, None]
        img = np.empty((self.coils.n_coil,) + self.image_shape, dtype=complex)
        for n in range(self.n_c):
            for t in range(self.t_s):
                img[:, :, :, n, t] = self._plan(n, t).adjoint(y[:, :, n, t])
        return self.scale * np.sum(np.conj(S) * img, axis=0)

    def _coil_images(self, x):
        """Coil images ``(n_coil, n_c, t_s, nx, ny)`` with contiguous spatial axes."""
        xt = _to_frames_first(x)
        return self.coils.maps[:, None, None] * xt[None]

    def _coil_combine(self, imgs):
        out = np.einsum("cxy,cntxy->ntxy", np.conj(self.coils.maps), imgs)
        return np.moveaxis(out, (2, 3), (0, 1))

    def _line_matrices(self):
        """Per-frame sampled rows of the centered y-DFT, ``(n_c, t_s, ny, L)``.

        Frames with fewer than ``L`` lines get zero columns.
        """
        if "lines" not in self._plans:
            ny = self.coils.maps.shape[2]
            m = np.broadcast_to(self.mask[0], (ny, self.n_c, self.t_s))
            L = max(int(m.sum(axis=0).max()), 1)
            c = np.arange(ny) - ny // 2
            F = np.exp(-2j * np.pi * np.outer(c, c) / ny) / math.sqrt(ny)   # F[k, n]
            E = np.zeros((self.n_c, self.t_s, ny, L), complex)
            for n in range(self.n_c):
                for t in range(self.t_s):
                    rows = np.flatnonzero(m[:, n, t])
                    E[n, t, :, : rows.size] = F[rows].T
            self._plans["lines"] = (E, np.conj(np.swapaxes(E, -1, -2)).copy())
        return self._plans["lines"]

    def normal(self, x):
        """``A'A x``.

        A mask constant along x makes the x-transforms cancel, so each
        frame only needs its sampled rows of the y-DFT.
        """
        x = np.asarray(x)
        if self.mode != "cartesian" or self.mask.shape[0] != 1:
            return self.adjoint(self.forward(x))
        self._check(x, self.image_shape, "image")
        E, Eh = self._line_matrices()
        k = self._coil_images(x) @ E
        return self.scale ** 2 * self._coil_combine(k @ Eh)


def dot_test(op: EncodingOp, seed: int = 0) -> float:
    """Relative discrepancy ``|<Ax, y> - <x, A'y>| / (||x|| ||y||)``."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(op.image_shape) + 1j * rng.standard_normal(op.image_shape)
    y = rng.standard_normal(op.data_shape) + 1j * rng.standard_normal(op.data_shape)
    if op.mode == "cartesian":
        y = y * op.mask[None]
    lhs = np.vdot(y, op.forward(x))
    rhs = np.vdot(op.adjoint(y), x)
    return float(abs(lhs - rhs) / (np.linalg.norm(x) * np.linalg.norm(y)))


def operator_norm(op: EncodingOp, iters: int = 30, seed: int = 0, return_trace: bool = False):
    """Largest singular value of ``op`` by power iteration on ``A'A``.

    The Rayleigh quotients of the normalized iterates form a
    non-decreasing sequence for a positive semidefinite ``A'A``.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(op.image_shape) + 1j * rng.standard_normal(op.image_shape)
    x /= np.linalg.norm(x)
    trace = []
    for _ in range(max(int(iters), 1)):
        ax = op.forward(x)
        trace.append(float(np.vdot(ax, ax).real))
        z = op.adjoint(ax)
        nz = np.linalg.norm(z)
        if nz == 0:
            break
        x = z / nz
    sigma = math.sqrt(max(trace)) if trace else 0.0
    if return_trace:
        return sigma, np.sqrt(np.asarray(trace))
    return sigma
