"""RMTT binary tensor files.

Layout: magic ``RMTT``, version byte 1, dtype byte 0 (float32 little-endian),
ndim byte, ndim int64 little-endian dims, then the raw row-major payload.
Every module that persists tensors (patches, checkpoints, embeddings) goes
through these two functions.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"RMTT"
VERSION = 1
DTYPE_F32 = 0


class TensorFileError(ValueError):
    """Malformed or unsupported RMTT file."""


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype="<f4")
    if not arr.flags["C_CONTIGUOUS"]:  # ascontiguousarray would promote 0-d to 1-d
        arr = np.ascontiguousarray(arr)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BBB", VERSION, DTYPE_F32, arr.ndim))
        for dim in arr.shape:
            fh.write(struct.pack("<q", dim))
        fh.write(arr.tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(7)
        if len(head) < 7 or head[:4] != MAGIC:
            raise TensorFileError(f"{path}: not an RMTT file")
        version, dtype, ndim = struct.unpack("<BBB", head[4:7])
        if version != VERSION:
            raise TensorFileError(f"{path}: unsupported version {version}")
        if dtype != DTYPE_F32:
            raise TensorFileError(f"{path}: unsupported dtype code {dtype}")
        dims = struct.unpack(f"<{ndim}q", fh.read(8 * ndim)) if ndim else ()
        if any(d < 0 for d in dims):
            raise TensorFileError(f"{path}: negative dimension")
        count = 1
        for d in dims:
            count *= d
        payload = fh.read(4 * count)
        if len(payload) != 4 * count:
            raise TensorFileError(f"{path}: truncated payload")
        if fh.read(1):
            raise TensorFileError(f"{path}: trailing bytes")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
