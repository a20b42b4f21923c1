"""Per-token, group-wise asymmetric integer quantization with clipping.

For one group ``x`` and ``n`` bits::

    clipped_min, clipped_max = clip_ratio * min(x), clip_ratio * max(x)
    scale = (clipped_max - clipped_min) / (2**n - 1)
    zero  = -round(clipped_min / scale)
    code  = clamp(round(x / scale) + zero, 0, 2**n - 1)
    x'    = scale * (code - zero)

``round`` is round-half-to-even. A group whose clipped range is below
``DEGENERATE_RANGE`` is stored so that it reconstructs its constant ``c``
exactly: ``scale = |c|`` with ``(zero, code) = (0, 1)`` for ``c >= 0`` and
``(1, 0)`` for ``c < 0``.

The vectorized ``quantize_rows`` / ``dequantize_rows`` pair is what the cache
uses; ``quantize_group`` and friends are thin wrappers over the same code, so
both paths produce bit-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LengthError, NumericError, ParameterError

DEFAULT_GROUP_SIZE = 128
DEGENERATE_RANGE = 1e-12
SUPPORTED_BITS = (2, 4)

_INT32_MIN, _INT32_MAX = -(2**31), 2**31 - 1


@dataclass(frozen=True)
class QuantParams:
    bits: int
    clip_ratio: float = 1.0
    group_size: int = DEFAULT_GROUP_SIZE

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise ParameterError(f"bits must be one of {SUPPORTED_BITS}, got {self.bits}")
        if not (0.0 < self.clip_ratio <= 1.0):
            raise ParameterError(f"clip_ratio must be in (0, 1], got {self.clip_ratio}")
        if self.group_size < 1:
            raise ParameterError(f"group_size must be >= 1, got {self.group_size}")

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1


@dataclass(frozen=True)
class QuantizedGroup:
    """One packed group. ``length`` counts the real (non-padding) elements."""

    codes: bytes
    scale: float
    zero: int
    bits: int
    group_size: int
    length: int

    def unpacked(self) -> np.ndarray:
        return unpack_codes(self.codes, self.group_size, self.bits)


@dataclass(frozen=True)
class QuantizedRow:
    groups: tuple[QuantizedGroup, ...]
    original_len: int


# --------------------------------------------------------------------------- packing


def _codes_per_byte(bits: int) -> int:
    if bits not in SUPPORTED_BITS:
        raise ParameterError(f"bits must be one of {SUPPORTED_BITS}, got {bits}")
    return 8 // bits


def pack_codes(codes, bits: int) -> np.ndarray:
    """Pack n-bit codes along the last axis, lowest bits first.

    2-bit: code i sits at bits ``2*(i % 4)`` of byte ``i // 4``.
    4-bit: even i in the low nibble, odd i in the high nibble.
    Trailing bits of the last byte are zero.
    """
    per_byte = _codes_per_byte(bits)
    arr = np.asarray(codes)
    if arr.size and (arr.min() < 0 or arr.max() >= (1 << bits)):
        raise ParameterError(f"codes out of range for {bits}-bit packing")
    arr = arr.astype(np.uint8)
    n = arr.shape[-1]
    pad = (-n) % per_byte
    if pad:
        arr = np.concatenate([arr, np.zeros(arr.shape[:-1] + (pad,), np.uint8)], axis=-1)
    arr = arr.reshape(arr.shape[:-1] + (-1, per_byte))
    shifts = (np.arange(per_byte, dtype=np.uint8) * bits).astype(np.uint8)
    return np.bitwise_or.reduce(arr << shifts, axis=-1).astype(np.uint8)


def unpack_codes(data, count: int, bits: int) -> np.ndarray:
    """Inverse of ``pack_codes`` for the first ``count`` codes of each row."""
    per_byte = _codes_per_byte(bits)
    if isinstance(data, (bytes, bytearray, memoryview)):
        arr = np.frombuffer(bytes(data), dtype=np.uint8)
    else:
        arr = np.asarray(data, dtype=np.uint8)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.shape[-1] * per_byte < count:
        raise LengthError(f"{arr.shape[-1]} bytes hold fewer than {count} {bits}-bit codes")
    shifts = (np.arange(per_byte, dtype=np.uint8) * bits).astype(np.uint8)
    mask = np.uint8((1 << bits) - 1)
    out = (arr[..., :, None] >> shifts) & mask
    return out.reshape(arr.shape[:-1] + (-1,))[..., :count]


# ---------------------------------------------------------------------- quantization


def clipped_range(group, clip_ratio: float) -> tuple[float, float]:
    g = np.asarray(group, dtype=np.float32)
    if g.size == 0:
        raise ParameterError("clipped_range of an empty group")
    if not (0.0 < clip_ratio <= 1.0):
        raise ParameterError(f"clip_ratio must be in (0, 1], got {clip_ratio}")
    return float(clip_ratio * np.float64(g.min())), float(clip_ratio * np.float64(g.max()))


def _split_groups(x: np.ndarray, group_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Zero-pad the last axis to whole groups: (..., G, group_size) plus a validity mask."""
    n = x.shape[-1]
    n_groups = -(-n // group_size)
    pad = n_groups * group_size - n
    if pad:
        x = np.concatenate([x, np.zeros(x.shape[:-1] + (pad,), x.dtype)], axis=-1)
    valid = np.arange(n_groups * group_size) < n
    shape = (n_groups, group_size)
    return x.reshape(x.shape[:-1] + shape), valid.reshape(shape)


def quantize_rows(x, p: QuantParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Quantize every row (last axis) of ``x`` independently.

    Returns unpacked codes ``(..., G, group_size)`` as uint8, scales
    ``(..., G)`` as float32 and zero-points ``(..., G)`` as int32.
    """
    x = np.asarray(x, dtype=np.float32)
    if x.shape[-1] == 0:
        raise ParameterError("cannot quantize an empty row")
    if not np.all(np.isfinite(x)):
        raise NumericError("quantize input contains NaN or Inf")
    groups, valid = _split_groups(x, p.group_size)
    padded = not valid.all()
    if padded:
        xmin = np.where(valid, groups, np.inf).min(axis=-1).astype(np.float64)
        xmax = np.where(valid, groups, -np.inf).max(axis=-1).astype(np.float64)
    else:
        xmin = groups.min(axis=-1).astype(np.float64)
        xmax = groups.max(axis=-1).astype(np.float64)
    cmin = p.clip_ratio * xmin
    cmax = p.clip_ratio * xmax
    degenerate = (cmax - cmin) < DEGENERATE_RANGE

    scale = np.where(degenerate, 1.0, (cmax - cmin) / p.qmax).astype(np.float32)
    scale64 = scale.astype(np.float64)
    zero = -np.rint(cmin / scale64)
    codes = groups.astype(np.float64)
    np.divide(codes, scale64[..., None], out=codes)
    np.rint(codes, out=codes)
    codes += zero[..., None]
    np.clip(codes, 0, p.qmax, out=codes)

    if np.any(degenerate):
        const = ((xmin + xmax) / 2).astype(np.float32)
        neg = const < 0
        scale = np.where(degenerate, np.abs(const), scale).astype(np.float32)
        zero = np.where(degenerate, np.where(neg, 1.0, 0.0), zero)
        deg_code = np.where(neg, 0.0, 1.0)
        codes = np.where(degenerate[..., None], deg_code[..., None], codes)

    if np.any(zero < _INT32_MIN) | np.any(zero > _INT32_MAX):
        raise NumericError("zero-point does not fit in int32")
    zero = zero.astype(np.int32)
    if padded:
        pad_code = np.clip(zero, 0, p.qmax)
        codes = np.where(valid, codes, pad_code[..., None])
    return codes.astype(np.uint8), scale, zero


def dequantize_rows(codes, scales, zeros, length: int | None = None) -> np.ndarray:
    """Reconstruct rows from ``(..., G, group_size)`` codes; trims padding to ``length``."""
    codes = np.asarray(codes)
    diff = codes.astype(np.float64)
    diff -= np.asarray(zeros, dtype=np.float64)[..., None]
    diff *= np.asarray(scales, dtype=np.float64)[..., None]
    out = diff.astype(np.float32)
    out = out.reshape(out.shape[:-2] + (-1,))
    return out if length is None else out[..., :length]


def quantize_group(group, p: QuantParams) -> QuantizedGroup:
    g = np.asarray(group, dtype=np.float32).reshape(-1)
    if g.size == 0:
        raise ParameterError("empty group")
    if g.size > p.group_size:
        raise ParameterError(f"group of {g.size} exceeds group_size {p.group_size}")
    codes, scale, zero = quantize_rows(g, p)
    return QuantizedGroup(
        codes=pack_codes(codes[0], p.bits).tobytes(),
        scale=float(scale[0]),
        zero=int(zero[0]),
        bits=p.bits,
        group_size=p.group_size,
        length=int(g.size),
    )


def dequantize_group(g: QuantizedGroup) -> np.ndarray:
    codes = g.unpacked()[None, :]
    return dequantize_rows(codes, np.float32([g.scale]), np.int32([g.zero]), g.length)


def quantize_row(row, p: QuantParams) -> QuantizedRow:
    r = np.asarray(row, dtype=np.float32).reshape(-1)
    codes, scales, zeros = quantize_rows(r, p)
    packed = pack_codes(codes, p.bits)
    n = r.size
    groups = tuple(
        QuantizedGroup(
            codes=packed[i].tobytes(),
            scale=float(scales[i]),
            zero=int(zeros[i]),
            bits=p.bits,
            group_size=p.group_size,
            length=min(p.group_size, n - i * p.group_size),
        )
        for i in range(codes.shape[0])
    )
    return QuantizedRow(groups=groups, original_len=n)


def dequantize_row(row: QuantizedRow) -> np.ndarray:
    return np.concatenate([dequantize_group(g) for g in row.groups])[: row.original_len]


def fake_quantize(x, p: QuantParams) -> np.ndarray:
    """Quantize-dequantize round trip along the last axis."""
    x = np.asarray(x, dtype=np.float32)
    codes, scales, zeros = quantize_rows(x, p)
    return dequantize_rows(codes, scales, zeros, x.shape[-1])


def effective_bits(bits: int, n_elements: int, group_size: int = DEFAULT_GROUP_SIZE) -> float:
    """Storage bits per element for one quantized row, including 64 bits of scale+zero per group."""
    n_groups = -(-n_elements // group_size)
    return (n_elements * bits + 64 * n_groups) / n_elements
