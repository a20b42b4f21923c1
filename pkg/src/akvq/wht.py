"""Walsh-Hadamard transform and the attention-preserving rotations built on it.

``H_1 = [1]`` and ``H_2d = [[H_d, H_d], [H_d, -H_d]] / sqrt(2)``. ``H`` is
symmetric and orthonormal, so ``H @ H == I``.

The key path rotates Q and K per head after RoPE, which leaves ``Q @ K.T``
unchanged. The value path folds ``H`` into the value projection's output
columns and ``H.T`` into the output projection's input rows, one head at a
time.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ParameterError, ShapeError, UndefinedMetricError

_INV_SQRT2 = np.float32(1.0 / math.sqrt(2.0))


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _check_dim(d: int) -> int:
    d = int(d)
    if not is_power_of_two(d):
        raise ParameterError(f"Hadamard dimension must be a power of two, got {d}")
    return d


def hadamard_matrix(d: int) -> np.ndarray:
    """Normalized Sylvester-Hadamard matrix of size ``d x d`` (float32)."""
    _check_dim(d)
    h = np.ones((1, 1), dtype=np.float64)
    s = 1.0 / math.sqrt(2.0)
    while h.shape[0] < d:
        h = s * np.block([[h, h], [h, -h]])
    return h.astype(np.float32)


def fwht_inplace(v: np.ndarray) -> np.ndarray:
    """Fast Walsh-Hadamard transform along the last axis, in place.

    ``v`` must be a writable float32 array whose last dimension is a power of
    two. Each butterfly level multiplies by 1/sqrt(2), so the result equals
    ``v @ H`` with no trailing rescale. Returns ``v``.
    """
    if not isinstance(v, np.ndarray) or v.dtype != np.float32:
        raise ParameterError("fwht_inplace needs a float32 numpy array")
    if not v.flags.c_contiguous or not v.flags.writeable:
        raise ParameterError("fwht_inplace needs a writable C-contiguous array")
    d = _check_dim(v.shape[-1])
    rows = v.size // d if d else 0
    if rows >= _TRANSPOSE_MIN_ROWS:
        # Butterflies over a (d, rows) buffer keep the inner loop long.
        flat = v.reshape(rows, d)
        step = max(_CHUNK_ELEMENTS // d, _TRANSPOSE_MIN_ROWS)
        for start in range(0, rows, step):
            block = flat[start:start + step]
            buf = np.ascontiguousarray(block.T)
            _butterflies(buf.reshape(1, d, block.shape[0]), d)
            block[...] = buf.T
    else:
        _butterflies(v.reshape(rows, d, 1), d)
    return v


_TRANSPOSE_MIN_ROWS = 32
_CHUNK_ELEMENTS = 1 << 16


def _butterflies(x: np.ndarray, d: int) -> None:
    """In-place normalized butterflies on axis ``-2`` of a contiguous (lead, d, tail) array."""
    lead, tail = x.shape[0], x.shape[2]
    h = 1
    while h < d:
        blocks = x.reshape(lead, d // (2 * h), 2, h * tail)
        a = blocks[:, :, 0]
        b = blocks[:, :, 1]
        tmp = a - b
        a += b
        a *= _INV_SQRT2
        np.multiply(tmp, _INV_SQRT2, out=b)
        h *= 2


def fwht(v) -> np.ndarray:
    """Out-of-place FWHT along the last axis."""
    out = np.array(v, dtype=np.float32, copy=True)
    if out.ndim == 0:
        out = out.reshape(1)
    return fwht_inplace(out)


def apply_qk_transform(q_rows, k_rows) -> tuple[np.ndarray, np.ndarray]:
    """Rotate post-RoPE query and key rows by ``H`` (per head, last axis)."""
    q = np.asarray(q_rows, dtype=np.float32)
    k = np.asarray(k_rows, dtype=np.float32)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"head dim mismatch: q {q.shape[-1]} vs k {k.shape[-1]}")
    _check_dim(q.shape[-1])
    return fwht(q), fwht(k)


def fold_value_weights(w_v, w_o, head_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Fold ``H`` into ``W_V`` (per-head output columns) and ``H.T`` into ``W_O`` (per-head input rows).

    ``w_v`` is ``(d_model, n_heads * head_dim)`` and ``w_o`` is
    ``(n_heads * head_dim, d_model)``; the usual square case has both ``d x d``.
    """
    w_v = np.asarray(w_v, dtype=np.float32)
    w_o = np.asarray(w_o, dtype=np.float32)
    _check_dim(head_dim)
    if w_v.ndim != 2 or w_o.ndim != 2:
        raise ShapeError("weights must be 2-D")
    inner = w_v.shape[1]
    if w_o.shape[0] != inner:
        raise ShapeError(f"W_V has {inner} output columns but W_O has {w_o.shape[0]} input rows")
    if inner % head_dim:
        raise ShapeError(f"head_dim {head_dim} does not divide {inner}")
    n_heads = inner // head_dim
    h = hadamard_matrix(head_dim).astype(np.float64)
    wv = w_v.astype(np.float64).reshape(w_v.shape[0], n_heads, head_dim)
    wo = w_o.astype(np.float64).reshape(n_heads, head_dim, w_o.shape[1])
    wv_folded = np.einsum("mhd,de->mhe", wv, h).reshape(w_v.shape)
    wo_folded = np.einsum("de,hdm->hem", h, wo).reshape(w_o.shape)
    return wv_folded.astype(np.float32), wo_folded.astype(np.float32)


def outlier_ratio(t) -> float:
    """Channel peak-to-mean ratio of mean absolute magnitudes (tokens x channels)."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 2 or t.size == 0:
        raise ShapeError("outlier_ratio expects a non-empty tokens x channels tensor")
    per_channel = np.abs(t).mean(axis=0)
    mean = per_channel.mean()
    if mean == 0.0:
        raise UndefinedMetricError("outlier ratio undefined for an all-zero tensor")
    return float(per_channel.max() / mean)
