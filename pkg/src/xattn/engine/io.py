"""Little-endian binary tensor format.

Layout of one record::

    magic     4 bytes   b"XATN"
    version   uint16    currently 1
    dtype     uint8     0 = float32, 1 = float64
    rank      uint8
    extents   uint32 * rank
    payload   row-major scalars, little-endian, of the given dtype

Records can be concatenated; :func:`read_tensor` consumes exactly one.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .tensor import Tensor

MAGIC = b"XATN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class FormatError(ValueError):
    pass


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    header = MAGIC + struct.pack("<HBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def write_tensor(fh: BinaryIO, t: Tensor | np.ndarray) -> None:
    fh.write(tensor_to_bytes(t))


def read_tensor(fh: BinaryIO) -> Tensor:
    head = fh.read(8)
    if len(head) < 8 or head[:4] != MAGIC:
        raise FormatError("not an XATN tensor record")
    version, code, rank = struct.unpack("<HBB", head[4:])
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    dt = _DTYPES[code]
    n = int(np.prod(shape)) if rank else 1
    raw = fh.read(n * dt.itemsize)
    if len(raw) != n * dt.itemsize:
        raise FormatError("truncated tensor payload")
    arr = np.frombuffer(raw, dtype=dt).astype(dt.newbyteorder("="), copy=True).reshape(shape)
    return Tensor(arr)


def save_tensor(path, t: Tensor | np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return read_tensor(fh)
