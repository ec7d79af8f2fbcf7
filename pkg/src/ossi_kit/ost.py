"""OST1 binary tensor container.

Layout (little-endian)::

    b"OST1" | version u8 | dtype u8 | ndim u8 | dims u32 * ndim | payload

dtype codes: 0 = float32, 1 = complex stored as interleaved float32
(real, imag) pairs, 2 = boolean stored as u8.  The payload is row-major.
Image series use axis order (x, y[, z], fast, slow).
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import DimensionMismatchError, InvalidParameterError

__all__ = ["MAGIC", "VERSION", "write_ost", "read_ost", "encode_ost", "decode_ost"]

MAGIC = b"OST1"
VERSION = 1
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<c8"), 2: np.dtype("u1")}


class OstFormatError(InvalidParameterError):
    """Malformed or unsupported OST data."""


def _code_for(arr: np.ndarray) -> int:
    if arr.dtype == np.bool_:
        return 2
    if np.iscomplexobj(arr):
        return 1
    if arr.dtype.kind in "fiu":
        return 0
    raise InvalidParameterError(f"unsupported dtype {arr.dtype}")


def encode_ost(arr) -> bytes:
    """Serialize ``arr``; floats become float32, complex becomes complex64."""
    arr = np.asarray(arr)
    if arr.ndim < 1 or arr.ndim > 255:
        raise DimensionMismatchError("OST arrays need 1 to 255 dimensions")
    if any(d == 0 for d in arr.shape):
        raise DimensionMismatchError(f"zero-length axis in shape {arr.shape}")
    if any(d >= 2 ** 32 for d in arr.shape):
        raise DimensionMismatchError("axis too long for u32 dims")
    code = _code_for(arr)
    payload = np.ascontiguousarray(arr, dtype=_CODES[code] if code != 2 else np.uint8)
    head = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + payload.tobytes()


def decode_ost(buf: bytes) -> np.ndarray:
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise OstFormatError("not an OST1 container")
    version, code, ndim = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise OstFormatError(f"unsupported OST version {version}")
    if code not in _CODES:
        raise OstFormatError(f"unknown dtype code {code}")
    if ndim == 0:
        raise OstFormatError("OST header has ndim = 0")
    off = 7 + 4 * ndim
    if len(buf) < off:
        raise OstFormatError("truncated OST header")
    dims = struct.unpack_from(f"<{ndim}I", buf, 7)
    if any(d == 0 for d in dims):
        raise OstFormatError(f"zero-length axis in dims {dims}")
    dt = _CODES[code]
    want = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(buf) - off != want:
        raise OstFormatError(f"payload has {len(buf) - off} bytes, expected {want}")
    arr = np.frombuffer(buf, dtype=dt, offset=off).reshape(dims)
    if code == 2:
        return arr.astype(bool)
    return arr.copy()


def write_ost(path, arr) -> None:
    data = encode_ost(arr)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_ost(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_ost(fh.read())
