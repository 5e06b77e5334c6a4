"""Binary tensor blobs.

Layout (all integers unsigned 32-bit little-endian)::

    magic   4 bytes   b"TBLB"
    dtype   u32       1 = float32, 2 = float64
    rank    u32
    dims    u32 * rank
    payload little-endian IEEE-754 values, row-major
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"TBLB"
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
TAGS = {"float32": 1, "float64": 2}


class BlobError(ValueError):
    pass


def encode(array: np.ndarray, dtype: str = "float32") -> bytes:
    if dtype not in TAGS:
        raise BlobError(f"unsupported blob dtype {dtype!r}")
    tag = TAGS[dtype]
    arr = np.asarray(array, dtype=DTYPES[tag], order="C")
    header = MAGIC + struct.pack(f"<II{arr.ndim}I", tag, arr.ndim, *arr.shape)
    return header + arr.tobytes()


def decode(buf: bytes) -> np.ndarray:
    """Decode one blob into a float64 array."""
    if len(buf) < 12:
        raise BlobError(f"blob too short: {len(buf)} bytes, header needs at least 12")
    if buf[:4] != MAGIC:
        raise BlobError(f"bad blob magic at offset 0: {buf[:4]!r}")
    tag, rank = struct.unpack_from("<II", buf, 4)
    if tag not in DTYPES:
        raise BlobError(f"unknown dtype tag {tag} at offset 4")
    header_len = 12 + 4 * rank
    if len(buf) < header_len:
        raise BlobError(f"blob header truncated: need {header_len} bytes, have {len(buf)}")
    dims = struct.unpack_from(f"<{rank}I", buf, 12)
    dt = DTYPES[tag]
    expected = header_len + int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(buf) != expected:
        raise BlobError(f"blob payload length mismatch: expected {expected} bytes total, got {len(buf)}")
    arr = np.frombuffer(buf, dtype=dt, offset=header_len).reshape(dims)
    return arr.astype(np.float64)


def write(path, array: np.ndarray, dtype: str = "float32") -> None:
    with open(path, "wb") as fh:
        fh.write(encode(array, dtype))


def read(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())
