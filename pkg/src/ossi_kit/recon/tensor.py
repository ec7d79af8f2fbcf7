"""Singular value thresholding, tensor unfoldings and patch tensors.

Patch tensors are ``(s_p, n_c, t)`` with the spatial patch vectorized in
C order.  The mode-``i`` unfolding moves axis ``i - 1`` to the front and
flattens the remaining two axes in C order, so mode 1 is
``s_p x (n_c t)``, mode 2 is ``n_c x (s_p t)`` and mode 3 is
``t x (s_p n_c)``.  Leading batch axes are carried along untouched.
"""

from __future__ import annotations

import numpy as np

from ..errors import DimensionMismatchError, InvalidParameterError

__all__ = ["svt", "unfold", "refold", "PatchGrid", "nuclear_norm"]


def _gram(M):
    """Smaller Gram matrix of ``M`` and whether ``M`` was used transposed."""
    wide = M.shape[-2] <= M.shape[-1]
    Mh = np.conj(np.swapaxes(M, -1, -2))
    return (M @ Mh if wide else Mh @ M), wide


def svt(M, tau: float, method: str = "svd"):
    """Singular value soft-thresholding, batched over leading axes.

    ``method="svd"`` is the exact proximal map.  ``method="gram"`` works
    from the eigendecomposition of the smaller Gram matrix, which is much
    faster for elongated unfoldings; singular values well above
    ``sqrt(eps) * s_max`` are handled to working accuracy and smaller ones
    are always shrunk to zero when ``tau`` exceeds them.
    """
    if tau < 0:
        raise InvalidParameterError("tau must be non-negative")
    M = np.asarray(M)
    if tau == 0:
        return M.copy()
    if method == "svd":
        U, s, Vh = np.linalg.svd(M, full_matrices=False)
        s = np.maximum(s - tau, 0.0)
        return (U * s[..., None, :]) @ Vh
    if method != "gram":
        raise InvalidParameterError(f"unknown svt method {method!r}")
    G, wide = _gram(M)
    w, U = np.linalg.eigh(G)
    s = np.sqrt(np.clip(w, 0.0, None))
    f = np.where(s > tau, 1.0 - tau / np.where(s > 0, s, 1.0), 0.0)
    P = (U * f[..., None, :]) @ np.conj(np.swapaxes(U, -1, -2))
    return P @ M if wide else M @ P


def nuclear_norm(M, method: str = "svd"):
    """Sum of singular values over the last two axes (array for batches)."""
    M = np.asarray(M)
    if method == "gram":
        w = np.linalg.eigvalsh(_gram(M)[0])
        out = np.sqrt(np.clip(w, 0.0, None)).sum(axis=-1)
    else:
        out = np.linalg.svd(M, compute_uv=False).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def _check_mode(mode):
    if mode not in (1, 2, 3):
        raise InvalidParameterError(f"mode must be 1, 2 or 3, got {mode}")


def unfold(T, mode: int):
    """Mode-``mode`` unfolding of ``(..., I1, I2, I3)``."""
    _check_mode(mode)
    T = np.asarray(T)
    if T.ndim < 3:
        raise DimensionMismatchError("unfold needs at least a 3-way tensor")
    moved = np.moveaxis(T, T.ndim - 3 + (mode - 1), -3)
    return moved.reshape(moved.shape[:-2] + (-1,))


def refold(M, mode: int, shape):
    """Inverse of :func:`unfold` for a tensor of ``shape``."""
    _check_mode(mode)
    M = np.asarray(M)
    shape = tuple(shape)
    if len(shape) < 3:
        raise DimensionMismatchError("refold needs a 3-way target shape")
    core = list(shape[-3:])
    lead = core.pop(mode - 1)
    want = shape[:-3] + (lead, core[0] * core[1])
    if M.shape != want:
        raise DimensionMismatchError(f"matrix {M.shape} does not refold to {shape}")
    T = M.reshape(shape[:-3] + (lead, core[0], core[1]))
    return np.moveaxis(T, -3, len(shape) - 3 + (mode - 1))


class PatchGrid:
    """Non-overlapping spatial patches of an image block ``(nx, ny, n_c, t)``.

    Images whose size is not a multiple of the patch size are reflect-padded
    at the high end and cropped after assembly.  A cycle-spin shift rolls
    the image before padding and is undone after cropping.
    """

    def __init__(self, image_shape, patch_dims):
        self.nx, self.ny = int(image_shape[0]), int(image_shape[1])
        px, py = (min(int(p), n) for p, n in zip(patch_dims, (self.nx, self.ny)))
        self.px, self.py = px, py
        self.pad = (-self.nx % px, -self.ny % py)
        self.bx = (self.nx + self.pad[0]) // px
        self.by = (self.ny + self.pad[1]) // py

    @property
    def n_patches(self) -> int:
        return self.bx * self.by

    @property
    def patch_size(self) -> int:
        return self.px * self.py

    def extract(self, X, shift=(0, 0)):
        """``(nx, ny, n_c, t)`` -> ``(M, s_p, n_c, t)``."""
        X = np.roll(X, shift, axis=(0, 1))
        if any(self.pad):
            X = np.pad(X, ((0, self.pad[0]), (0, self.pad[1]), (0, 0), (0, 0)), mode="reflect")
        nc, t = X.shape[2:]
        P = X.reshape(self.bx, self.px, self.by, self.py, nc, t).transpose(0, 2, 1, 3, 4, 5)
        return P.reshape(self.n_patches, self.patch_size, nc, t)

    def assemble(self, P, shift=(0, 0)):
        nc, t = P.shape[2:]
        X = P.reshape(self.bx, self.by, self.px, self.py, nc, t).transpose(0, 2, 1, 3, 4, 5)
        X = X.reshape(self.bx * self.px, self.by * self.py, nc, t)[: self.nx, : self.ny]
        return np.roll(X, (-shift[0], -shift[1]), axis=(0, 1))
