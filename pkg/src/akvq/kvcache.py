"""Mixed-precision KV cache with fp16 / int4 / int2 token regions.

Every incoming row is first rounded to f16, the precision the cache models
for full-precision storage. Rows in the recent window (and pivots of PSA
layers) stay in the fp16 region. When a token slides out of the window it is
quantized, per token, into its policy tier. Because quantization always reads
the f16-rounded row, prefilling T tokens and appending them one at a time
produce bit-identical contents.

Keys and values of one layer share a storage block whose leading axis is
``0 = keys, 1 = values``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ParameterError, ShapeError, StateError
from .quantizer import (
    DEFAULT_GROUP_SIZE,
    QuantizedGroup,
    QuantizedRow,
    QuantParams,
    dequantize_rows,
    pack_codes,
    quantize_rows,
    unpack_codes,
)
from .saliency import (
    DEFAULT_N_PIVOT_MAX,
    DEFAULT_RECENT_WINDOW,
    LayerPolicy,
    Pattern,
    Tier,
    base_tiers,
    build_policies,
    text_mask,
)
from .tensor_io import round_f16, save_tensor
from .wht import is_power_of_two

KEYS, VALUES = 0, 1
OVERHEAD_BYTES_PER_GROUP = 8  # f32 scale + i32 zero-point
_BYTES_PER_ELEMENT = {Tier.FP16: 2.0, Tier.INT4: 0.5, Tier.INT2: 0.25}


@dataclass(frozen=True)
class CacheConfig:
    n_layers: int
    n_heads: int
    n_kv_heads: int
    head_dim: int
    group_size: int = DEFAULT_GROUP_SIZE
    clip_int2: float = 0.8
    clip_int4: float = 1.0
    recent_window: int = DEFAULT_RECENT_WINDOW
    n_pivot_max: int = DEFAULT_N_PIVOT_MAX
    wht_enabled: bool = True
    # False keeps every row exact (no f16 rounding, no quantization).
    quantize: bool = True
    # Store every token in this tier, ignoring policies and the recent window.
    force_tier: Tier | None = None

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "n_kv_heads", "head_dim", "group_size"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if self.n_heads % self.n_kv_heads:
            raise ParameterError(f"n_heads {self.n_heads} not divisible by n_kv_heads {self.n_kv_heads}")
        if self.wht_enabled and not is_power_of_two(self.head_dim):
            raise ParameterError(f"WHT needs a power-of-two head_dim, got {self.head_dim}")
        if self.recent_window < 0 or self.n_pivot_max < 0:
            raise ParameterError("recent_window and n_pivot_max must be >= 0")
        # validates clip ratios
        QuantParams(2, self.clip_int2, self.group_size)
        QuantParams(4, self.clip_int4, self.group_size)
        if self.force_tier is not None:
            object.__setattr__(self, "force_tier", Tier(self.force_tier))

    @property
    def n_groups(self) -> int:
        return -(-self.head_dim // self.group_size)

    def quant_params(self, tier: Tier) -> QuantParams:
        if tier == Tier.INT2:
            return QuantParams(2, self.clip_int2, self.group_size)
        if tier == Tier.INT4:
            return QuantParams(4, self.clip_int4, self.group_size)
        raise ParameterError(f"tier {tier!r} is not quantized")

    def kv_head_for(self, q_head: int) -> int:
        return q_head // (self.n_heads // self.n_kv_heads)

    def default_policies(self, tsa_layers=(), pivots=()) -> list[LayerPolicy]:
        return build_policies(self.n_layers, tsa_layers, pivots, self.recent_window, self.n_pivot_max)


@dataclass(frozen=True)
class MemoryReport:
    bytes_fp16: float
    bytes_int4: float
    bytes_int2: float
    bytes_overhead: float
    total_elements: int
    effective_bits_per_element: float
    compression_ratio_vs_fp16: float

    @property
    def total_bytes(self) -> float:
        return self.bytes_fp16 + self.bytes_int4 + self.bytes_int2 + self.bytes_overhead


def memory_from_counts(rows_fp16: int, rows_int4: int, rows_int2: int, head_dim: int,
                       group_size: int = DEFAULT_GROUP_SIZE) -> MemoryReport:
    """Closed-form accounting for a set of stored rows of ``head_dim`` elements."""
    n_groups = -(-head_dim // group_size)
    b16 = rows_fp16 * head_dim * _BYTES_PER_ELEMENT[Tier.FP16]
    b4 = rows_int4 * head_dim * _BYTES_PER_ELEMENT[Tier.INT4]
    b2 = rows_int2 * head_dim * _BYTES_PER_ELEMENT[Tier.INT2]
    overhead = float((rows_int4 + rows_int2) * n_groups * OVERHEAD_BYTES_PER_GROUP)
    elements = (rows_fp16 + rows_int4 + rows_int2) * head_dim
    if elements == 0:
        return MemoryReport(0.0, 0.0, 0.0, 0.0, 0, 0.0, 1.0)
    bits = 8.0 * (b16 + b4 + b2 + overhead) / elements
    return MemoryReport(b16, b4, b2, overhead, elements, bits, 16.0 / bits)


class _Store:
    """Dense storage for all layers; rows are addressed by (layer, kv_head, token).

    fp16-region rows live directly in ``view``; quantized rows are dequantized
    into it from the stored codes. The layout ``(2, layers, kv_heads, tokens,
    head_dim)`` lets attention over every layer read ``view`` without copying.
    """

    _TOKEN_AXIS = {"tiers": 1, "has_fp": 1, "has_q": 1, "view": 3, "codes": 3, "scales": 3, "zeros": 3}

    def __init__(self, layers: int, kv_heads: int, head_dim: int, n_groups: int, group_size: int,
                 capacity: int):
        packed_width = -(-group_size // 2)  # wide enough for 4-bit codes
        self.tiers = np.zeros((layers, capacity), np.int8)
        self.has_fp = np.zeros((layers, capacity), bool)
        self.has_q = np.zeros((layers, capacity), bool)
        self.view = np.zeros((2, layers, kv_heads, capacity, head_dim), np.float32)
        self.codes = np.zeros((2, layers, kv_heads, capacity, n_groups, packed_width), np.uint8)
        self.scales = np.zeros((2, layers, kv_heads, capacity, n_groups), np.float32)
        self.zeros = np.zeros((2, layers, kv_heads, capacity, n_groups), np.int32)
        self.heads = np.arange(kv_heads)[None, :]

    @property
    def capacity(self) -> int:
        return self.tiers.shape[1]

    def grow(self, capacity: int) -> None:
        for name, axis in self._TOKEN_AXIS.items():
            old = getattr(self, name)
            shape = list(old.shape)
            shape[axis] = capacity
            new = np.zeros(shape, old.dtype)
            index = [slice(None)] * old.ndim
            index[axis] = slice(0, old.shape[axis])
            new[tuple(index)] = old
            setattr(self, name, new)

    def rows_index(self, layers: np.ndarray, tokens: np.ndarray) -> tuple:
        """Index selecting ``(2, n, kv_heads, ...)`` for n (layer, token) pairs."""
        return (slice(None), layers[:, None], self.heads, tokens[:, None])


class MixedPrecisionKVCache:
    """Per-layer, per-KV-head cache of keys and values in three precision regions.

    Each layer's ``LayerPolicy`` decides the tier a token takes once it leaves
    that layer's recent window. ``cfg.recent_window`` and ``cfg.n_pivot_max``
    are only used when building default policies.
    """

    def __init__(self, cfg: CacheConfig, policies: Sequence[LayerPolicy] | None = None,
                 capacity: int = 16):
        """``capacity`` is the initial token capacity; storage doubles as needed."""
        if capacity < 1:
            raise ParameterError("capacity must be >= 1")
        if policies is None:
            policies = cfg.default_policies()
        by_layer = {p.layer_index: p for p in policies}
        if len(by_layer) != len(policies):
            raise ParameterError("duplicate layer policies")
        missing = [i for i in range(cfg.n_layers) if i not in by_layer]
        if missing:
            raise ParameterError(f"no policy for layers {missing}")
        extra = sorted(set(by_layer) - set(range(cfg.n_layers)))
        if extra:
            raise ParameterError(f"policies for unknown layers {extra}")
        self.cfg = cfg
        self.policies = [by_layer[i] for i in range(cfg.n_layers)]
        self.length = 0
        self._is_text = np.zeros(capacity, bool)
        self._store = _Store(cfg.n_layers, cfg.n_kv_heads, cfg.head_dim, cfg.n_groups, cfg.group_size,
                             capacity)
        self._all_layers = np.arange(cfg.n_layers)

    # ------------------------------------------------------------------ writes

    def _reserve(self, needed: int) -> None:
        store = self._store
        if needed <= store.capacity:
            return
        cap = store.capacity
        while cap < needed:
            cap *= 2
        store.grow(cap)
        grown = np.zeros(cap, bool)
        grown[: self._is_text.shape[0]] = self._is_text
        self._is_text = grown

    def _prepare(self, kv: np.ndarray) -> np.ndarray:
        return round_f16(kv) if self.cfg.quantize else kv.astype(np.float32, copy=True)

    def _write(self, layers: np.ndarray, tokens: np.ndarray, tier: Tier, rows: np.ndarray) -> None:
        """Store ``rows`` (2, n, kv_heads, d) for n (layer, token) pairs in ``tier``."""
        s = self._store
        idx = s.rows_index(layers, tokens)
        if tier == Tier.FP16:
            s.view[idx] = rows
            s.has_q[layers, tokens] = False
            s.has_fp[layers, tokens] = True
        else:
            p = self.cfg.quant_params(tier)
            codes, scales, zeros = quantize_rows(rows, p)
            packed = pack_codes(codes, p.bits)
            width = packed.shape[-1]
            s.codes[idx] = 0
            s.codes[idx + (slice(None), slice(0, width))] = packed
            s.scales[idx] = scales
            s.zeros[idx] = zeros
            # Reconstruct from what was actually stored.
            stored = unpack_codes(s.codes[idx + (slice(None), slice(0, width))], p.group_size, p.bits)
            s.view[idx] = dequantize_rows(stored, scales, zeros, self.cfg.head_dim)
            s.has_fp[layers, tokens] = False
            s.has_q[layers, tokens] = True
        s.tiers[layers, tokens] = tier

    def _write_grouped(self, layers: np.ndarray, tokens: np.ndarray, tiers: np.ndarray, rows: np.ndarray) -> None:
        for tier in (Tier.FP16, Tier.INT4, Tier.INT2):
            sel = np.flatnonzero(tiers == tier)
            if sel.size:
                self._write(layers[sel], tokens[sel], tier, rows[:, sel])

    def _target_tiers(self, layer: int, positions: np.ndarray, total_len: int) -> np.ndarray:
        if not self.cfg.quantize:
            return np.full(positions.shape, int(Tier.FP16), np.int8)
        if self.cfg.force_tier is not None:
            return np.full(positions.shape, int(self.cfg.force_tier), np.int8)
        policy = self.policies[layer]
        tiers = base_tiers(positions, self._is_text[positions], policy)
        if policy.recent_window:
            tiers[positions >= total_len - policy.recent_window] = Tier.FP16
        return tiers

    def _target_tier(self, layer: int, pos: int, total_len: int) -> Tier:
        """Scalar form of ``_target_tiers`` for the one-token decode path."""
        if not self.cfg.quantize:
            return Tier.FP16
        if self.cfg.force_tier is not None:
            return Tier(self.cfg.force_tier)
        policy = self.policies[layer]
        if policy.recent_window and pos >= total_len - policy.recent_window:
            return Tier.FP16
        if policy.pattern is Pattern.PSA and pos in policy.pivot_indices:
            return Tier.FP16
        if self._is_text[pos] and (policy.pattern is Pattern.TSA or policy.text_int4_in_psa):
            return Tier.INT4
        return Tier.INT2

    def _check_rows(self, arr, tokens: int | None, name: str) -> np.ndarray:
        arr = np.asarray(arr, dtype=np.float32)
        c = self.cfg
        expected = (c.n_layers, c.n_kv_heads) + ((tokens,) if tokens is not None else ()) + (c.head_dim,)
        if arr.shape != expected:
            raise ShapeError(f"{name} has shape {arr.shape}, expected {expected}")
        return arr

    def prefill(self, keys, values, modality) -> None:
        """Bulk-insert a prompt: keys/values are ``(layers, kv_heads, tokens, head_dim)``."""
        if self.length:
            raise StateError("prefill requires an empty cache")
        keys = np.asarray(keys, dtype=np.float32)
        if keys.ndim != 4:
            raise ShapeError(f"keys must be 4-D, got shape {keys.shape}")
        n = keys.shape[2]
        keys = self._check_rows(keys, n, "keys")
        values = self._check_rows(values, n, "values")
        is_text = text_mask(modality)
        if is_text.shape[0] != n:
            raise ShapeError(f"{is_text.shape[0]} modality labels for {n} tokens")
        if n == 0:
            return
        self._reserve(n)
        self._is_text[:n] = is_text
        positions = np.arange(n)
        for layer in range(self.cfg.n_layers):
            # (2, kv_heads, n, d) -> (2, n, kv_heads, d)
            rows = self._prepare(np.stack([keys[layer], values[layer]]).transpose(0, 2, 1, 3))
            layers = np.full(n, layer)
            self._write_grouped(layers, positions, self._target_tiers(layer, positions, n), rows)
        self.length = n

    def append_decode(self, k_row, v_row, modality) -> None:
        """Append one token: ``k_row``/``v_row`` are ``(layers, kv_heads, head_dim)``."""
        k_row = self._check_rows(k_row, None, "k_row")
        v_row = self._check_rows(v_row, None, "v_row")
        is_text = text_mask([modality])[0]
        t = self.length
        self._reserve(t + 1)
        self._is_text[t] = is_text
        new_len = t + 1
        n_layers = self.cfg.n_layers
        layers = self._all_layers
        rows = self._prepare(np.stack([k_row, v_row]))  # (2, layers, kv_heads, d)
        tiers = np.array([self._target_tier(layer, t, new_len) for layer in range(n_layers)], np.int8)
        self._write_grouped(layers, np.full(n_layers, t), tiers, rows)

        if not self.cfg.quantize or self.cfg.force_tier is not None:
            self.length = new_len
            return
        # Tokens sliding out of each layer's recent window take their base tier.
        ev_layers, ev_tokens, ev_tiers = [], [], []
        for layer, policy in enumerate(self.policies):
            window = policy.recent_window
            leaving = new_len - 1 - window
            if window and leaving >= 0 and self._store.tiers[layer, leaving] == Tier.FP16:
                tier = self._target_tier(layer, leaving, new_len)
                if tier != Tier.FP16:
                    ev_layers.append(layer)
                    ev_tokens.append(leaving)
                    ev_tiers.append(tier)
        if ev_layers:
            el = np.array(ev_layers)
            et = np.array(ev_tokens)
            old = self._store.view[self._store.rows_index(el, et)]
            self._write_grouped(el, et, np.array(ev_tiers, np.int8), old)
        self.length = new_len

    # ------------------------------------------------------------------- reads

    def _check_layer(self, layer: int) -> int:
        if not 0 <= layer < self.cfg.n_layers:
            raise ParameterError(f"layer {layer} out of range [0, {self.cfg.n_layers})")
        return layer

    def _check_head(self, kv_head: int) -> None:
        if not 0 <= kv_head < self.cfg.n_kv_heads:
            raise ParameterError(f"kv_head {kv_head} out of range [0, {self.cfg.n_kv_heads})")

    def dequantized_view(self, layer: int, kv_head: int) -> tuple[np.ndarray, np.ndarray]:
        """Copies of the (tokens, head_dim) key and value rows as attention sees them."""
        layer = self._check_layer(layer)
        self._check_head(kv_head)
        n = self.length
        view = self._store.view
        return view[KEYS, layer, kv_head, :n].copy(), view[VALUES, layer, kv_head, :n].copy()

    def layer_view(self, layer: int) -> np.ndarray:
        """Read-only ``(2, kv_heads, tokens, head_dim)`` view; invalidated by the next write."""
        v = self._store.view[:, self._check_layer(layer), :, : self.length]
        v.flags.writeable = False
        return v

    def kv_view(self) -> np.ndarray:
        """Read-only ``(2, layers, kv_heads, tokens, head_dim)`` view of every layer."""
        v = self._store.view[:, :, :, : self.length]
        v.flags.writeable = False
        return v

    def token_tiers(self, layer: int) -> np.ndarray:
        return self._store.tiers[self._check_layer(layer), : self.length].copy()

    def modality(self) -> np.ndarray:
        """Boolean is-text flags for the stored tokens."""
        return self._is_text[: self.length].copy()

    def region_indices(self, layer: int) -> dict[Tier, np.ndarray]:
        tiers = self.token_tiers(layer)
        return {t: np.flatnonzero(tiers == t) for t in (Tier.FP16, Tier.INT4, Tier.INT2)}

    def quantized_row(self, layer: int, kv_head: int, token: int, which: int = KEYS) -> QuantizedRow:
        layer = self._check_layer(layer)
        self._check_head(kv_head)
        if not 0 <= token < self.length:
            raise ParameterError(f"token {token} out of range")
        s = self._store
        tier = Tier(int(s.tiers[layer, token]))
        if tier == Tier.FP16:
            raise ParameterError(f"token {token} is in the fp16 region")
        p = self.cfg.quant_params(tier)
        width = -(-p.group_size * p.bits // 8)
        d = self.cfg.head_dim
        groups = tuple(
            QuantizedGroup(
                codes=s.codes[which, layer, kv_head, token, g, :width].tobytes(),
                scale=float(s.scales[which, layer, kv_head, token, g]),
                zero=int(s.zeros[which, layer, kv_head, token, g]),
                bits=p.bits,
                group_size=p.group_size,
                length=min(p.group_size, d - g * p.group_size),
            )
            for g in range(self.cfg.n_groups)
        )
        return QuantizedRow(groups=groups, original_len=d)

    def memory_report(self) -> MemoryReport:
        tiers = self._store.tiers[:, : self.length]
        rows_per_token = 2 * self.cfg.n_kv_heads
        counts = {t: int(np.count_nonzero(tiers == t)) * rows_per_token for t in Tier}
        return memory_from_counts(counts[Tier.FP16], counts[Tier.INT4], counts[Tier.INT2],
                                  self.cfg.head_dim, self.cfg.group_size)

    def validate(self) -> None:
        """Raise AssertionError if region bookkeeping is inconsistent."""
        n = self.length
        s = self._store
        for layer in range(self.cfg.n_layers):
            tiers = s.tiers[layer, :n]
            fp = tiers == Tier.FP16
            q = (tiers == Tier.INT4) | (tiers == Tier.INT2)
            if not np.all(fp | q):
                raise AssertionError(f"layer {layer}: token without a region")
            if not (np.array_equal(s.has_fp[layer, :n], fp) and np.array_equal(s.has_q[layer, :n], q)):
                raise AssertionError(f"layer {layer}: region occupancy disagrees with token tiers")
            if np.any(s.has_fp[layer, n:]) or np.any(s.has_q[layer, n:]):
                raise AssertionError(f"layer {layer}: rows stored beyond length {n}")

    # ---------------------------------------------------------------- snapshot

    def dump_snapshot(self, directory: str | os.PathLike) -> Path:
        """Write one AKV1 tensor per (layer, kv_head, region, K/V) plus ``manifest.txt``.

        Tensors hold the dequantized rows of that region in token order. This
        is a debugging aid, not a stable format.
        """
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["# layer kv_head region kind file tokens"]
        view = self._store.view
        for layer in range(self.cfg.n_layers):
            for tier, idx in self.region_indices(layer).items():
                if idx.size == 0:
                    continue
                region = tier.name.lower()
                tokens = ",".join(str(i) for i in idx)
                for h in range(self.cfg.n_kv_heads):
                    for which, kind in ((KEYS, "k"), (VALUES, "v")):
                        name = f"l{layer}_h{h}_{region}_{kind}.akv"
                        save_tensor(view[which, layer, h, idx], out / name)
                        lines.append(f"{layer} {h} {region} {kind} {name} {tokens}")
        (out / "manifest.txt").write_text("\n".join(lines) + "\n")
        return out
