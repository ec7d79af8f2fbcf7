"""Manifold dictionaries over (T2, R2*, f0) and VARPRO matching."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from ._parallel import ordered_map
from .bloch import SampleTime, SequenceParams, steady_state_cycles
from .errors import DimensionMismatchError, InvalidParameterError
from .voxel import IntegrationGrid, cauchy_pdf

__all__ = [
    "ParamGrid",
    "Dictionary",
    "MatchResult",
    "ParamMaps",
    "grid_values",
    "build_dictionary",
    "match_voxel",
    "match_voxels",
    "match_image",
]


def grid_values(start: float, stop: float, step: float) -> np.ndarray:
    """``start + step*k`` for every k that stays within ``stop``.

    A 1e-9 guard absorbs floating-point error in ``(stop - start)/step``.
    """
    if step <= 0:
        raise InvalidParameterError("grid step must be positive")
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    if n < 1:
        raise InvalidParameterError("empty grid")
    return np.round(start + step * np.arange(n), 10)


def _strictly_increasing(name, v):
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if v.size == 0:
        raise InvalidParameterError(f"{name} is empty")
    if np.any(np.diff(v) <= 0):
        raise InvalidParameterError(f"{name} must be strictly increasing")
    return v


@dataclass
class ParamGrid:
    """Dictionary grid; T2' follows from 1/T2' = R2* - 1/T2."""

    t1_fixed_ms: float = 1400.0
    t2_values_ms: np.ndarray = field(default_factory=lambda: grid_values(40.0, 150.0, 1.0))
    r2s_values_hz: np.ndarray = field(default_factory=lambda: grid_values(12.0, 38.0, 0.1))
    f0_values_hz: np.ndarray = field(default_factory=lambda: grid_values(-33.3, 33.3, 0.22))

    def __post_init__(self):
        self.t2_values_ms = _strictly_increasing("t2_values_ms", self.t2_values_ms)
        self.r2s_values_hz = _strictly_increasing("r2s_values_hz", self.r2s_values_hz)
        self.f0_values_hz = _strictly_increasing("f0_values_hz", self.f0_values_hz)
        if np.any(self.t2_values_ms <= 0) or self.t1_fixed_ms < self.t2_values_ms.max():
            raise InvalidParameterError("need t1 >= every t2 > 0")

    @classmethod
    def fixed_t2(cls, t2_ms: float, **kw) -> "ParamGrid":
        return cls(t2_values_ms=np.array([float(t2_ms)]), **kw)

    def retained(self):
        """Yield ``(t2, r2s_array, t2p_array)`` with infeasible R2* dropped."""
        for t2 in self.t2_values_ms:
            r = self.r2s_values_hz[self.r2s_values_hz > 1000.0 / t2]
            yield float(t2), r, 1000.0 / (r - 1000.0 / t2)

    def to_dict(self) -> dict:
        return {"t1_fixed_ms": float(self.t1_fixed_ms),
                "t2_values_ms": self.t2_values_ms.tolist(),
                "r2s_values_hz": self.r2s_values_hz.tolist(),
                "f0_values_hz": self.f0_values_hz.tolist()}


@dataclass
class Dictionary:
    """Dense dictionary; column ``k`` of ``atoms`` is the atom for ``params[k]``.

    Ordering is f0 fastest, then R2*, then T2.
    """

    atoms: np.ndarray            # (n_c, K) complex
    atom_norms: np.ndarray       # (K,)
    t2: np.ndarray
    t2p: np.ndarray
    r2s: np.ndarray
    f0: np.ndarray
    seq: SequenceParams
    grid: ParamGrid
    blocks: list                 # (start, n_r2s, n_f0) per T2
    _search: dict = field(default_factory=dict, repr=False)

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[1]

    def params(self, k: int) -> dict:
        return {"t2": float(self.t2[k]), "t2p": float(self.t2p[k]),
                "r2s": float(self.r2s[k]), "f0": float(self.f0[k])}

    def search_index(self):
        if "U" not in self._search:
            self._search.update(_build_search_index(self))
        return self._search


@dataclass
class MatchResult:
    theta_hat: dict
    m0_hat: complex
    residual_norm: float
    atom_index: int
    degenerate: bool = False


@dataclass
class ParamMaps:
    m0: np.ndarray
    f0: np.ndarray
    r2s: np.ndarray
    t2p: np.ndarray
    t2: np.ndarray
    residual: np.ndarray
    atom_index: np.ndarray
    degenerate: np.ndarray


def build_dictionary(grid: ParamGrid | None, seq: SequenceParams,
                     integration: IntegrationGrid | None = None,
                     sample_time=SampleTime.AT_TE) -> Dictionary:
    """Simulate one unit-m0 voxel atom per retained grid point."""
    grid = grid or ParamGrid()
    integration = integration or IntegrationGrid()
    iso = integration.freqs
    f0 = grid.f0_values_hz
    n_c = seq.n_c
    cols, t2s, t2ps, r2ss, f0s, blocks = [], [], [], [], [], []
    start = 0
    for t2, r2s, t2p in grid.retained():
        if r2s.size == 0:
            continue
        cyc = steady_state_cycles(seq, grid.t1_fixed_ms, t2, (f0[:, None] + iso[None, :]).ravel(),
                                  sample_time)
        cyc = cyc.reshape(f0.size, iso.size, n_c).transpose(1, 0, 2).reshape(iso.size, -1)
        w = np.stack([cauchy_pdf(iso, tp) for tp in t2p])
        w /= w.sum(axis=1, keepdims=True)
        a = (w @ cyc).reshape(r2s.size, f0.size, n_c)
        cols.append(a.reshape(-1, n_c))
        t2s.append(np.full(a.shape[0] * a.shape[1], t2))
        r2ss.append(np.repeat(r2s, f0.size))
        t2ps.append(np.repeat(t2p, f0.size))
        f0s.append(np.tile(f0, r2s.size))
        blocks.append((start, r2s.size, f0.size))
        start += r2s.size * f0.size
    if not cols:
        raise InvalidParameterError("no feasible (T2, R2*) pairs in the grid")
    atoms = np.ascontiguousarray(np.concatenate(cols).T)
    norms = np.linalg.norm(atoms, axis=0)
    if np.any(norms <= 0):
        raise InvalidParameterError("dictionary contains zero atoms (flip angle 0?)")
    return Dictionary(atoms, norms, np.concatenate(t2s), np.concatenate(t2ps),
                      np.concatenate(r2ss), np.concatenate(f0s), seq, grid, blocks)


# ---------------------------------------------------------------------------
# exact branch-and-bound search
# ---------------------------------------------------------------------------

# two-level tiling of each T2 slice's (R2*, f0) plane
COARSE_TILE = (32, 32)
COARSE_RANK = 4
FINE_TILE = (8, 8)
FINE_RANK = 2


def _tile_basis(X: np.ndarray, rank: int):
    """Orthonormal dominant basis of the columns of ``X`` and the worst
    column residual outside it."""
    u, _, _ = np.linalg.svd(X, full_matrices=False)
    B = np.zeros((X.shape[0], rank), dtype=complex)
    r = min(rank, u.shape[1])
    B[:, :r] = u[:, :r]
    err = np.linalg.norm(X - B @ (B.conj().T @ X), axis=0).max()
    # margin for rounding in the bound itself
    return B, err * (1 + 1e-9) + 1e-9


def _build_search_index(d: Dictionary) -> dict:
    """Two-level tiling of the (R2*, f0) plane of every T2 slice.

    Every tile keeps an orthonormal basis ``B`` of its normalized atoms and
    the largest member residual ``e`` outside that basis.  For a unit atom
    ``u`` in the tile, ``|u'v| <= ||B'v|| + e*||(I - BB')v||``, so whole
    tiles are skipped without ever changing the exhaustive answer.
    """
    U = np.ascontiguousarray((d.atoms / d.atom_norms).T)    # (K, n_c)
    n_c = U.shape[1]
    cr, cf = COARSE_TILE
    fr, ff = FINE_TILE
    coarse_B, coarse_e, coarse_ptr = [], [], [0]
    fine_B, fine_e, fine_ptr, members = [], [], [0], []
    for start, n_r, n_f in d.blocks:
        idx = start + np.arange(n_r * n_f).reshape(n_r, n_f)
        for r0 in range(0, n_r, cr):
            for f0 in range(0, n_f, cf):
                block = idx[r0:r0 + cr, f0:f0 + cf]
                B, e = _tile_basis(U[block.ravel()].T, COARSE_RANK)
                coarse_B.append(B)
                coarse_e.append(e)
                for r1 in range(0, block.shape[0], fr):
                    for f1 in range(0, block.shape[1], ff):
                        m = np.sort(block[r1:r1 + fr, f1:f1 + ff].ravel())
                        Bf, ef = _tile_basis(U[m].T, FINE_RANK)
                        fine_B.append(Bf.conj().T)
                        fine_e.append(ef)
                        members.append(m)
                        fine_ptr.append(fine_ptr[-1] + m.size)
                coarse_ptr.append(len(fine_B))
    proj = np.stack(coarse_B).conj().transpose(1, 0, 2).reshape(n_c, -1)
    return {"U": U, "proj": np.ascontiguousarray(proj), "coarse_err": np.asarray(coarse_e),
            "coarse_ptr": np.asarray(coarse_ptr, dtype=np.int64),
            "fine_basis": np.ascontiguousarray(np.stack(fine_B)),
            "fine_err": np.asarray(fine_e),
            "fine_ptr": np.asarray(fine_ptr, dtype=np.int64),
            "members": np.concatenate(members).astype(np.int64)}


@numba.njit(cache=True, fastmath=True, nogil=True)
def _scan_tile(U, V, q, lo, hi, members, best, bi):
    n_c = V.shape[1]
    for p in range(lo, hi):
        k = members[p]
        re = 0.0
        im = 0.0
        for n in range(n_c):
            a = U[k, n]
            b = V[q, n]
            re += a.real * b.real + a.imag * b.imag
            im += a.real * b.imag - a.imag * b.real
        val = re * re + im * im
        if val > best or (val == best and k < bi):
            best = val
            bi = k
    return best, bi


@numba.njit(cache=True, fastmath=True, nogil=True)
def _scan_coarse(U, V, q, vn2, c, fine_basis, fine_err, coarse_ptr, fine_ptr, members, best, bi):
    lo = coarse_ptr[c]
    hi = coarse_ptr[c + 1]
    n_c = V.shape[1]
    rank = fine_basis.shape[1]
    ub = np.empty(hi - lo)
    for g in range(lo, hi):
        pn2 = 0.0
        for r in range(rank):
            re = 0.0
            im = 0.0
            for n in range(n_c):
                a = fine_basis[g, r, n]
                b = V[q, n]
                re += a.real * b.real - a.imag * b.imag
                im += a.real * b.imag + a.imag * b.real
            pn2 += re * re + im * im
        rn = math.sqrt(max(vn2 - pn2, 0.0))
        ub[g - lo] = (math.sqrt(pn2) + fine_err[g] * rn) * (1 + 1e-9) + 1e-12 * math.sqrt(vn2)
    order = np.argsort(-ub)
    for o in range(order.shape[0]):
        u = ub[order[o]]
        if u * u < best:
            break
        g = lo + order[o]
        best, bi = _scan_tile(U, V, q, fine_ptr[g], fine_ptr[g + 1], members, best, bi)
    return best, bi


@numba.njit(cache=True, fastmath=True, nogil=True)
def _bnb_kernel(U, V, vnorm, bounds, fine_basis, fine_err, coarse_ptr, fine_ptr, members,
                best_idx, best_val):
    for q in range(V.shape[0]):
        vn2 = vnorm[q] * vnorm[q]
        order = np.argsort(-bounds[q])
        best = -1.0
        bi = 0
        for o in range(order.shape[0]):
            c = order[o]
            u = bounds[q, c]
            if u * u < best:
                break
            best, bi = _scan_coarse(U, V, q, vn2, c, fine_basis, fine_err, coarse_ptr,
                                    fine_ptr, members, best, bi)
        best_idx[q] = bi
        best_val[q] = best


def _coarse_bounds(s: dict, V: np.ndarray, vnorm: np.ndarray) -> np.ndarray:
    c = V @ s["proj"]
    pn2 = (c.real ** 2 + c.imag ** 2).reshape(V.shape[0], -1, COARSE_RANK).sum(axis=2)
    rn = np.sqrt(np.maximum(vnorm[:, None] ** 2 - pn2, 0.0))
    ub = np.sqrt(pn2) + s["coarse_err"][None, :] * rn
    return np.ascontiguousarray(ub * (1 + 1e-9) + 1e-12 * vnorm[:, None])


def _exhaustive(d: Dictionary, V: np.ndarray, chunk: int = 256) -> np.ndarray:
    U = d.search_index()["U"]
    idx = np.empty(V.shape[0], dtype=np.int64)
    for s in range(0, V.shape[0], chunk):
        c = V[s:s + chunk] @ U.conj().T
        idx[s:s + chunk] = np.argmax(np.abs(c) ** 2, axis=1)
    return idx


def match_voxels(V, d: Dictionary, method: str = "bnb", chunk: int = 512):
    """VARPRO match of many fast-time vectors ``V`` of shape ``(N, n_c)``.

    Returns ``(atom_index, m0_hat, residual_norm, degenerate)``.  The
    default branch-and-bound search returns exactly the exhaustive argmax
    (ties to the lowest index).
    """
    V = np.ascontiguousarray(np.atleast_2d(np.asarray(V, dtype=complex)))
    if V.shape[1] != d.atoms.shape[0]:
        raise DimensionMismatchError(
            f"signal length {V.shape[1]} does not match dictionary n_c={d.atoms.shape[0]}")
    vnorm = np.linalg.norm(V, axis=1)
    degenerate = vnorm == 0
    if method == "exhaustive":
        idx = _exhaustive(d, V)
    elif method == "bnb":
        s = d.search_index()
        idx = np.empty(V.shape[0], dtype=np.int64)
        val = np.empty(V.shape[0])

        def run(a):
            Vc = V[a:a + chunk]
            vc = vnorm[a:a + chunk]
            _bnb_kernel(s["U"], Vc, vc, _coarse_bounds(s, Vc, vc), s["fine_basis"],
                        s["fine_err"], s["coarse_ptr"], s["fine_ptr"], s["members"],
                        idx[a:a + chunk], val[a:a + chunk])

        # chunk boundaries do not depend on the worker count
        ordered_map(run, range(0, V.shape[0], chunk))
    else:
        raise InvalidParameterError(f"unknown match method {method!r}")
    idx[degenerate] = 0
    phi = d.atoms[:, idx].T
    nrm2 = d.atom_norms[idx] ** 2
    m0 = np.einsum("kn,kn->k", phi.conj(), V) / nrm2
    m0[degenerate] = 0
    resid = np.linalg.norm(V - m0[:, None] * phi, axis=1)
    return idx, m0, resid, degenerate


def match_voxel(v, d: Dictionary, method: str = "bnb") -> MatchResult:
    v = np.asarray(v, dtype=complex).ravel()
    idx, m0, res, deg = match_voxels(v[None, :], d, method)
    k = int(idx[0])
    return MatchResult(d.params(k), complex(m0[0]), float(res[0]), k, bool(deg[0]))


def match_image(v_set, d: Dictionary, mask=None, method: str = "bnb") -> ParamMaps:
    """Voxel-wise match of ``(spatial..., n_c)`` data; zeros outside mask."""
    v_set = np.asarray(v_set, dtype=complex)
    sp = v_set.shape[:-1]
    if v_set.shape[-1] != d.atoms.shape[0]:
        raise DimensionMismatchError(
            f"fast-time length {v_set.shape[-1]} does not match n_c={d.atoms.shape[0]}")
    if mask is None:
        mask = np.ones(sp, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != sp:
        raise DimensionMismatchError(f"mask shape {mask.shape} does not match image {sp}")
    out = ParamMaps(np.zeros(sp, complex), np.zeros(sp), np.zeros(sp), np.zeros(sp),
                    np.zeros(sp), np.zeros(sp), np.zeros(sp, np.int64), np.zeros(sp, bool))
    if not mask.any():
        return out
    idx, m0, res, deg = match_voxels(v_set[mask], d, method)
    out.m0[mask] = m0
    out.f0[mask] = d.f0[idx]
    out.r2s[mask] = d.r2s[idx]
    out.t2p[mask] = d.t2p[idx]
    out.t2[mask] = d.t2[idx]
    out.residual[mask] = res
    out.atom_index[mask] = idx
    out.degenerate[mask] = deg
    return out
