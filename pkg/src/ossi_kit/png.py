"""Minimal PNG heatmap writer (8-bit grayscale or viridis RGB)."""

from __future__ import annotations

import struct
import zlib

import numpy as np

__all__ = ["write_png", "to_uint8", "viridis", "overlay"]

# viridis control points at 0, 1/8, ..., 1; linear interpolation in between
_VIRIDIS = np.array([
    [68, 1, 84], [71, 44, 122], [59, 81, 139], [44, 113, 142], [33, 144, 141],
    [39, 173, 129], [92, 200, 99], [170, 220, 50], [253, 231, 37]], dtype=float)


def to_uint8(img, vmin=None, vmax=None) -> np.ndarray:
    """Scale a real image to 0..255; non-finite values map to 0."""
    a = np.asarray(img, dtype=float)
    finite = np.isfinite(a)
    lo = np.min(a[finite]) if vmin is None and finite.any() else (vmin or 0.0)
    hi = np.max(a[finite]) if vmax is None and finite.any() else (vmax if vmax is not None else 1.0)
    scale = (hi - lo) if hi > lo else 1.0
    out = np.clip((np.where(finite, a, lo) - lo) / scale, 0, 1)
    return np.round(out * 255).astype(np.uint8)


def viridis(u8: np.ndarray) -> np.ndarray:
    x = u8.astype(float) / 255 * (len(_VIRIDIS) - 1)
    i = np.minimum(x.astype(int), len(_VIRIDIS) - 2)
    f = (x - i)[..., None]
    rgb = _VIRIDIS[i] * (1 - f) + _VIRIDIS[i + 1] * f
    return np.round(rgb).astype(np.uint8)


def overlay(background, mask, color=(255, 0, 0)) -> np.ndarray:
    """Grayscale background with ``mask`` pixels painted ``color``."""
    g = to_uint8(np.abs(background))
    rgb = np.repeat(g[..., None], 3, axis=-1)
    rgb[np.asarray(mask, bool)] = color
    return rgb


def _chunk(tag: bytes, data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data))


def write_png(path, img, colormap: str = "gray", vmin=None, vmax=None) -> None:
    """Write a 2D real image (or an RGB uint8 array) as PNG.

    Array axis 0 becomes image rows.
    """
    a = np.asarray(img)
    if a.ndim == 3 and a.shape[2] == 3 and a.dtype == np.uint8:
        rgb, ctype = a, 2
    elif a.ndim == 2:
        u8 = to_uint8(np.abs(a) if np.iscomplexobj(a) else a, vmin, vmax)
        if colormap == "viridis":
            rgb, ctype = viridis(u8), 2
        elif colormap == "gray":
            rgb, ctype = u8, 0
        else:
            raise ValueError(f"unknown colormap {colormap!r}")
    else:
        raise ValueError("write_png expects a 2D image or an RGB uint8 array")
    h, w = rgb.shape[:2]
    rows = rgb.reshape(h, -1)
    raw = b"".join(b"\x00" + rows[r].tobytes() for r in range(h))
    data = b"\x89PNG\r\n\x1a\n"
    data += _chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, ctype, 0, 0, 0))
    data += _chunk(b"IDAT", zlib.compress(raw, 9))
    data += _chunk(b"IEND", b"")
    with open(path, "wb") as fh:
        fh.write(data)
