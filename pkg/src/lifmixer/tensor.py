"""Dense rank-4 tensor substrate.

A tensor here is a C-contiguous ``numpy.ndarray`` with ``ndim == 4`` in NCHW
order and dtype float32 or float64. There is no broadcasting anywhere in the
package; every helper checks shapes explicitly.

The binary dump format (``LIFT``) is::

    b"LIFT" | u32 dtype_code | u32 n | u32 c | u32 h | u32 w | data

all little-endian, dtype_code 0 = float32, 1 = float64, data in flat NCHW
order.
"""
from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from typing import BinaryIO, Callable, Iterator

import numpy as np

__all__ = [
    "DTYPES",
    "H",
    "W",
    "AxisBlockView",
    "check_tensor4",
    "zeros",
    "ew_map",
    "ew_zip",
    "reduce_mean_hw",
    "flat_offset",
    "iter_blocks",
    "write_tensor",
    "read_tensor",
    "save_tensor",
    "load_tensor",
]

DTYPES = {"f32": np.float32, "f64": np.float64, "real32": np.float32, "real64": np.float64}

H = 2
W = 3

_MAGIC = b"LIFT"
_HEADER = struct.Struct("<4s5I")
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str):
        dtype = DTYPES[dtype]
    dt = np.dtype(dtype)
    if dt not in _DTYPE_CODES:
        raise ValueError(f"unsupported dtype {dt}; expected float32 or float64")
    return dt


def check_tensor4(x, name: str = "x") -> np.ndarray:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ValueError(f"{name} must be a rank-4 ndarray, got {getattr(x, 'shape', type(x))}")
    if x.dtype not in _DTYPE_CODES:
        raise ValueError(f"{name} has unsupported dtype {x.dtype}")
    return x


def zeros(n: int, c: int, h: int, w: int, dtype=np.float32) -> np.ndarray:
    if min(n, c, h, w) < 0:
        raise ValueError(f"negative extent in {(n, c, h, w)}")
    return np.zeros((n, c, h, w), dtype=_resolve_dtype(dtype))


def ew_map(x: np.ndarray, f: Callable[[float], float]) -> np.ndarray:
    """Apply a scalar function to every element; shape and dtype preserved."""
    check_tensor4(x)
    out = np.empty_like(x)
    flat_in = x.reshape(-1)
    flat_out = out.reshape(-1)
    for i in range(flat_in.size):
        flat_out[i] = f(flat_in[i])
    return out


def ew_zip(a: np.ndarray, b: np.ndarray, f: Callable[[float, float], float]) -> np.ndarray:
    check_tensor4(a, "a")
    check_tensor4(b, "b")
    if a.shape != b.shape or a.dtype != b.dtype:
        raise ValueError(
            f"shape/dtype mismatch: a is {a.shape} {a.dtype}, b is {b.shape} {b.dtype}"
        )
    out = np.empty_like(a)
    fa, fb, fo = a.reshape(-1), b.reshape(-1), out.reshape(-1)
    for i in range(fa.size):
        fo[i] = f(fa[i], fb[i])
    return out


def reduce_mean_hw(x: np.ndarray) -> np.ndarray:
    check_tensor4(x)
    n, c, h, w = x.shape
    if h * w == 0:
        raise ValueError(f"cannot average over an empty HxW plane (shape {x.shape})")
    return x.mean(axis=(2, 3), keepdims=True)


def flat_offset(shape: tuple[int, int, int, int], i: int, j: int, k: int, l: int) -> int:
    _, c, h, w = shape
    return ((i * c + j) * h + k) * w + l


@dataclass(frozen=True)
class AxisBlockView:
    """Contiguous block ``[block_start, block_start + block_len)`` along H or W.

    ``array`` is a numpy view, so writes through it land in ``base``.
    """

    base: np.ndarray
    axis: int
    block_start: int
    block_len: int

    def __post_init__(self):
        if self.axis not in (H, W):
            raise ValueError(f"axis must be H ({H}) or W ({W}), got {self.axis}")
        extent = self.base.shape[self.axis]
        if self.block_len < 1 or self.block_start < 0 or self.block_start + self.block_len > extent:
            raise ValueError(
                f"block [{self.block_start}, {self.block_start + self.block_len}) "
                f"out of range for axis extent {extent}"
            )

    @property
    def array(self) -> np.ndarray:
        sl = [slice(None)] * 4
        sl[self.axis] = slice(self.block_start, self.block_start + self.block_len)
        return self.base[tuple(sl)]

    def read(self) -> np.ndarray:
        return self.array.copy()

    def write(self, values: np.ndarray) -> None:
        view = self.array
        if values.shape != view.shape:
            raise ValueError(f"write shape {values.shape} does not match view shape {view.shape}")
        view[...] = values


def iter_blocks(x: np.ndarray, axis: int, block_len: int) -> Iterator[AxisBlockView]:
    """Consecutive blocks of ``block_len`` along ``axis``; the last one may be shorter."""
    extent = x.shape[axis]
    for start in range(0, extent, block_len):
        yield AxisBlockView(x, axis, start, min(block_len, extent - start))


def write_tensor(f: BinaryIO, x: np.ndarray) -> int:
    check_tensor4(x)
    code = _DTYPE_CODES[x.dtype]
    header = _HEADER.pack(_MAGIC, code, *x.shape)
    payload = np.ascontiguousarray(x, dtype=_CODE_DTYPES[code]).tobytes()
    f.write(header)
    f.write(payload)
    return len(header) + len(payload)


def read_tensor(f: BinaryIO) -> np.ndarray:
    raw = f.read(_HEADER.size)
    if len(raw) != _HEADER.size:
        raise ValueError("truncated LIFT header")
    magic, code, n, c, h, w = _HEADER.unpack(raw)
    if magic != _MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    if code not in _CODE_DTYPES:
        raise ValueError(f"unknown dtype code {code}")
    dt = _CODE_DTYPES[code]
    nbytes = n * c * h * w * dt.itemsize
    data = f.read(nbytes)
    if len(data) != nbytes:
        raise ValueError(f"truncated LIFT payload: expected {nbytes} bytes, got {len(data)}")
    return np.frombuffer(data, dtype=dt).astype(dt.newbyteorder("="), copy=True).reshape(n, c, h, w)


def save_tensor(path: str | os.PathLike, x: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, x)


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


def dumps(x: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, x)
    return buf.getvalue()
