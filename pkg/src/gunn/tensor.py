"""Tensor conventions and the GTNS binary record format.

Feature maps are plain ``numpy.ndarray`` values laid out as
``(batch, channel, rows, cols)``. Double precision is the default; single
precision is opt-in for training speed.

A GTNS record is::

    b"GTNS" | version:u32 | rank:u32 | dims:u64 * rank | dtype:u32 | data

All integers are little-endian and the element data is raw little-endian.
"""

from __future__ import annotations

import io
import struct
from typing import BinaryIO

import numpy as np

DEFAULT_DTYPE = np.float64

MAGIC = b"GTNS"
VERSION = 1

# dtype codes stored after the dims
_DTYPE_CODES = {
    np.dtype("<f8"): 0,
    np.dtype("<f4"): 1,
    np.dtype("<i8"): 2,
    np.dtype("<u1"): 3,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class ShapeError(ValueError):
    """Raised when tensor shapes do not line up for an operation."""


class FormatError(ValueError):
    """Raised when a serialized record is malformed."""


def resolve_dtype(precision: str | np.dtype | type | None) -> np.dtype:
    """Map ``"f64"``/``"f32"`` (or a numpy dtype) to a float dtype."""
    if precision is None:
        return np.dtype(DEFAULT_DTYPE)
    if isinstance(precision, str):
        table = {"f64": np.float64, "float64": np.float64, "f32": np.float32, "float32": np.float32}
        if precision not in table:
            raise ValueError(f"unknown precision {precision!r}; expected f32 or f64")
        return np.dtype(table[precision])
    dt = np.dtype(precision)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported float dtype {dt}")
    return dt


def check_shape(name: str, arr: np.ndarray, expected: tuple) -> None:
    """Reject ``arr`` unless its shape equals ``expected`` (``None`` = any size)."""
    shape = tuple(arr.shape)
    if len(shape) != len(expected) or any(e is not None and e != s for s, e in zip(shape, expected)):
        raise ShapeError(f"{name}: got shape {shape}, expected {tuple(expected)}")


def write_tensor(fp: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise FormatError(f"cannot serialize dtype {arr.dtype}")
    fp.write(MAGIC)
    fp.write(struct.pack("<II", VERSION, arr.ndim))
    fp.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fp.write(struct.pack("<I", _DTYPE_CODES[dt]))
    fp.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_tensor(fp: BinaryIO) -> np.ndarray:
    start = fp.tell() if fp.seekable() else 0
    head = fp.read(12)
    if len(head) < 12:
        raise FormatError(f"truncated tensor header at byte {start}")
    magic, (version, rank) = head[:4], struct.unpack("<II", head[4:])
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte {start}")
    if version != VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    raw = fp.read(8 * rank + 4)
    if len(raw) < 8 * rank + 4:
        raise FormatError(f"truncated tensor dims at byte {start}")
    dims = struct.unpack(f"<{rank}Q", raw[: 8 * rank])
    (code,) = struct.unpack("<I", raw[8 * rank :])
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code} at byte {start}")
    dt = _CODE_DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    data = fp.read(count * dt.itemsize)
    if len(data) != count * dt.itemsize:
        raise FormatError(
            f"truncated tensor data at byte {start}: expected {count * dt.itemsize} bytes, got {len(data)}"
        )
    return np.frombuffer(data, dtype=dt).reshape(dims).copy()


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(data))
