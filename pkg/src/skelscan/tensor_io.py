"""TDMT binary tensor dumps.

Layout (little-endian): the 4 magic bytes ``TDMT``, u8 version (1), u8 dtype
(0 = f32, 1 = f64), u32 rank, ``rank`` u64 extents, then the row-major payload.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct

import numpy as np

from .errors import DataError

MAGIC = b"TDMT"
VERSION = 1
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def dumps(array) -> bytes:
    arr = np.asarray(getattr(array, "data", array))
    code = _CODES.get(arr.dtype)
    if code is None:
        raise DataError(f"TDMT supports float32/float64, got {arr.dtype}")
    header = MAGIC + struct.pack("<BBI", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    return header + payload


def loads(blob: bytes) -> np.ndarray:
    buf = io.BytesIO(blob)
    if buf.read(4) != MAGIC:
        raise DataError("not a TDMT dump (bad magic)")
    head = buf.read(6)
    if len(head) != 6:
        raise DataError("truncated TDMT header")
    version, code, rank = struct.unpack("<BBI", head)
    if version != VERSION:
        raise DataError(f"unsupported TDMT version {version}")
    if code not in _DTYPES:
        raise DataError(f"unknown TDMT dtype code {code}")
    ext = buf.read(8 * rank)
    if len(ext) != 8 * rank:
        raise DataError("truncated TDMT extents")
    shape = struct.unpack(f"<{rank}Q", ext)
    dtype = _DTYPES[code]
    count = int(np.prod(shape)) if rank else 1
    payload = buf.read()
    if len(payload) != count * dtype.itemsize:
        raise DataError(f"TDMT payload has {len(payload)} bytes, expected {count * dtype.itemsize}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def save(path: str | os.PathLike, array) -> str:
    """Write ``array`` to ``path`` and return the sha256 of the written bytes."""
    blob = dumps(array)
    with open(path, "wb") as fh:
        fh.write(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return loads(fh.read())
