"""Tensor helpers: the AKV1 binary format, f16 rounding and seeded generation.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 in C order.

AKV1 layout (all integers little-endian)::

    offset  size      field
    0       4         magic  b"AKV1"
    4       1         dtype_code (0 = f32)
    5       1         ndim, 1..8
    6       8*ndim    dims, unsigned 64-bit, each >= 1
    ...     4*prod    payload, row-major little-endian f32
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import FormatError, LengthError, NumericError, ParameterError, SizeError

MAGIC = b"AKV1"
DTYPE_F32 = 0
MAX_NDIM = 8
# Largest element count whose f32 payload still fits a signed 64-bit byte offset.
_MAX_ELEMENTS = (2**63 - 1) // 4

PathLike = Union[str, os.PathLike]


def as_tensor(x, *, copy: bool = False) -> np.ndarray:
    """Coerce to a C-contiguous float32 array."""
    arr = np.array(x, dtype=np.float32, copy=copy, order="C")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


def round_f16(x) -> np.ndarray:
    """Round to the IEEE binary16 grid (nearest-even) and widen back to f32.

    Raises NumericError if a value overflows the f16 range.
    """
    arr = np.asarray(x, dtype=np.float32)
    with np.errstate(over="ignore"):
        out = arr.astype(np.float16).astype(np.float32)
    if not np.all(np.isfinite(out)):
        raise NumericError("value outside the finite f16 range")
    return out


def encode_header(shape: Sequence[int]) -> bytes:
    if not 1 <= len(shape) <= MAX_NDIM:
        raise FormatError(f"ndim must be in [1, {MAX_NDIM}], got {len(shape)}")
    if any(int(d) < 1 for d in shape):
        raise FormatError(f"every dim must be >= 1, got {list(shape)}")
    return MAGIC + struct.pack("<BB", DTYPE_F32, len(shape)) + struct.pack(f"<{len(shape)}Q", *shape)


def tensor_to_bytes(t) -> bytes:
    arr = np.ascontiguousarray(t, dtype=np.float32)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return encode_header(arr.shape) + arr.astype("<f4", copy=False).tobytes(order="C")


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 6:
        raise LengthError(f"header truncated: {len(buf)} bytes")
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    dtype_code, ndim = buf[4], buf[5]
    if dtype_code != DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype_code}")
    if not 1 <= ndim <= MAX_NDIM:
        raise FormatError(f"ndim must be in [1, {MAX_NDIM}], got {ndim}")
    header_len = 6 + 8 * ndim
    if len(buf) < header_len:
        raise LengthError(f"header truncated: need {header_len} bytes, have {len(buf)}")
    dims = struct.unpack_from(f"<{ndim}Q", buf, 6)
    if any(d < 1 for d in dims):
        raise FormatError(f"every dim must be >= 1, got {list(dims)}")
    count = 1
    for d in dims:
        count *= d
        if count > _MAX_ELEMENTS:
            raise SizeError(f"dims {list(dims)} overflow the addressable size")
    expected = header_len + 4 * count
    if len(buf) != expected:
        raise LengthError(f"payload holds {len(buf) - header_len} bytes, header implies {4 * count}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=header_len)
    return data.astype(np.float32).reshape(dims)


def load_tensor(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())


def save_tensor(t, path: PathLike) -> None:
    payload = tensor_to_bytes(t)
    with open(path, "wb") as fh:
        fh.write(payload)


@dataclass(frozen=True)
class Gaussian:
    mean: float = 0.0
    std: float = 1.0


@dataclass(frozen=True)
class Uniform:
    lo: float = 0.0
    hi: float = 1.0


def gen_random(shape: Sequence[int], seed: int, dist: Gaussian | Uniform = Gaussian()) -> np.ndarray:
    """Deterministic float32 tensor for ``(shape, seed, dist)``.

    Uses numpy's PCG64 generator (a 128-bit multiplicative congruential
    state with an xor-shift output permutation), so the same arguments yield
    the same tensor on every run.
    """
    shape = tuple(int(d) for d in shape)
    if any(d < 1 for d in shape):
        raise ParameterError(f"invalid shape {shape}")
    rng = np.random.Generator(np.random.PCG64(seed))
    if isinstance(dist, Gaussian):
        if dist.std < 0:
            raise ParameterError(f"std must be >= 0, got {dist.std}")
        out = rng.normal(dist.mean, dist.std, size=shape)
    elif isinstance(dist, Uniform):
        if dist.lo > dist.hi:
            raise ParameterError(f"lo ({dist.lo}) > hi ({dist.hi})")
        out = rng.uniform(dist.lo, dist.hi, size=shape)
    else:
        raise ParameterError(f"unknown distribution {dist!r}")
    return out.astype(np.float32)
