"""Reference attention: rotary embeddings and causal softmax attention (float32)."""

from __future__ import annotations

import numpy as np

from .errors import ParameterError, ShapeError


def rope_apply(rows, positions, base: float = 10000.0) -> np.ndarray:
    """Rotate channel pairs ``(2i, 2i+1)`` by ``pos * base**(-2i/head_dim)``.

    ``rows`` is ``(..., tokens, head_dim)``; ``positions`` has one entry per token.
    """
    x = np.asarray(rows, dtype=np.float32)
    d = x.shape[-1]
    if d % 2:
        raise ParameterError(f"RoPE needs an even head_dim, got {d}")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1)
    if pos.shape[0] != x.shape[-2]:
        raise ShapeError(f"{pos.shape[0]} positions for {x.shape[-2]} tokens")
    inv_freq = base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    angle = pos[:, None] * inv_freq[None, :]
    cos, sin = np.cos(angle), np.sin(angle)
    even = x[..., 0::2].astype(np.float64)
    odd = x[..., 1::2].astype(np.float64)
    out = np.empty(x.shape, dtype=np.float32)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def attention_weights(q, keys, causal_offset: int | None = None) -> np.ndarray:
    """Softmax attention probabilities ``(heads, q_tokens, k_tokens)``.

    Query ``i`` sits at absolute position ``causal_offset + i`` and sees keys
    ``0..causal_offset + i``. ``causal_offset=None`` treats the queries as the
    last ``q_tokens`` positions; pass ``-1`` to disable masking. Query heads
    share KV heads in contiguous groups (GQA).
    """
    q = np.asarray(q, dtype=np.float32)
    k = np.asarray(keys, dtype=np.float32)
    if q.ndim != 3 or k.ndim != 3:
        raise ShapeError("q and keys must be (heads, tokens, head_dim)")
    n_heads, n_q, d = q.shape
    n_kv, n_k, dk = k.shape
    if d != dk:
        raise ShapeError(f"head_dim mismatch: {d} vs {dk}")
    if n_kv < 1 or n_heads % n_kv:
        raise ShapeError(f"{n_heads} query heads cannot share {n_kv} KV heads")
    if n_k < 1:
        raise ShapeError("no key tokens")
    group = n_heads // n_kv
    qg = q.reshape(n_kv, group * n_q, d)
    scores = np.matmul(qg, k.transpose(0, 2, 1))
    scores *= np.float32(1.0 / np.sqrt(d))
    scores = scores.reshape(n_kv, group, n_q, n_k)
    if causal_offset is None:
        causal_offset = n_k - n_q
    if causal_offset >= 0:
        if n_q + causal_offset > n_k:
            raise ShapeError(f"{n_q} queries at offset {causal_offset} exceed {n_k} keys")
        visible = np.arange(n_k)[None, :] <= (causal_offset + np.arange(n_q))[:, None]
        scores = np.where(visible, scores, -np.inf)
    return softmax(scores).reshape(n_heads, n_q, n_k).astype(np.float32)


def attention_forward(q, keys, values, causal_offset: int | None = None) -> np.ndarray:
    """``softmax(q k^T / sqrt(d) + mask) v`` per head -> ``(heads, q_tokens, head_dim)``."""
    k = np.asarray(keys, dtype=np.float32)
    v = np.asarray(values, dtype=np.float32)
    if v.shape[:2] != k.shape[:2]:
        raise ShapeError(f"keys {k.shape} and values {v.shape} disagree on heads/tokens")
    w = attention_weights(q, k, causal_offset)
    n_heads, n_q, n_k = w.shape
    n_kv = k.shape[0]
    wg = w.reshape(n_kv, (n_heads // n_kv) * n_q, n_k)
    return np.matmul(wg, v).reshape(n_heads, n_q, v.shape[-1])
