"""Desk-scale prefill + decode simulation: exact baseline vs. quantized cache.

Each layer gets its own seeded synthetic Q/K/V stream with the features the
method reacts to:

* a few "hot" key channels scaled by ``hot_multiplier`` (channel outliers),
* text keys that queries prefer in TSA layers,
* pivot tokens (token 0 plus a few injected vision positions) whose keys
  align with a sink direction shared by all queries in PSA layers,
* a slowly drifting component shared by nearby queries and keys (locality).

The pivot positions are also written as massive activations into a synthetic
residual stream, and the quantized runs find them again with
``detect_pivot_tokens``.

Step 0 scores the final prefill query against the cached prompt; step ``s``
appends decode token ``s`` and scores its query. Outputs are compared before
the output projection. With the WHT enabled the cache holds rotated keys and
values, queries are rotated to match, and outputs are rotated back (the part
the folded output projection would absorb).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import lfilter

from .attention import attention_forward, rope_apply
from .kvcache import CacheConfig, MemoryReport, MixedPrecisionKVCache
from .saliency import (
    DEFAULT_TAU,
    LayerPolicy,
    Pattern,
    Tier,
    build_policies,
    detect_pivot_tokens,
)
from .errors import ParameterError
from .wht import fwht, fwht_inplace

# Low-frequency RoPE pairs barely rotate over a few thousand positions, so
# directions placed there keep their alignment between query and key.
_LOW_FREQ_CHANNELS = 16


@dataclass(frozen=True)
class SimConfig:
    cache: CacheConfig = field(default_factory=lambda: CacheConfig(32, 4, 1, 128))
    seq_len_prefill: int = 512
    decode_steps: int = 64
    rope_base: float = 10000.0
    seed: int = 0
    # Vision tokens occupy [vision_start, vision_start + vision_fraction * prefill).
    vision_fraction: float = 0.75
    vision_start: int = 8
    tsa_layers: tuple[int, ...] = (0, 1)
    hot_channels: int = 2
    hot_multiplier: float = 20.0
    n_injected_pivots: int = 3
    massive_magnitude: float = 1000.0
    residual_dim: int = 256
    tau: float = DEFAULT_TAU
    # Logit bonuses (at zero distance) that shape the attention patterns.
    sink_bonus: float = 6.0
    text_bonus: float = 2.5
    local_bonus: float = 3.0
    local_span: float = 16.0

    def __post_init__(self):
        if self.seq_len_prefill < 1:
            raise ParameterError("seq_len_prefill must be >= 1")
        if self.decode_steps < 0:
            raise ParameterError("decode_steps must be >= 0")
        if not 0.0 <= self.vision_fraction <= 1.0:
            raise ParameterError("vision_fraction must be in [0, 1]")
        if self.cache.head_dim % 2:
            raise ParameterError("head_dim must be even for RoPE")
        if self.hot_channels > self.cache.head_dim:
            raise ParameterError("more hot channels than head_dim")

    @property
    def total_tokens(self) -> int:
        return self.seq_len_prefill + self.decode_steps

    def vision_span(self) -> tuple[int, int]:
        n_vision = int(round(self.vision_fraction * self.seq_len_prefill))
        start = min(self.vision_start, self.seq_len_prefill - n_vision)
        return start, start + n_vision

    def is_text(self) -> np.ndarray:
        """Modality of every prompt and decode token; decode tokens are text."""
        mask = np.ones(self.total_tokens, bool)
        a, b = self.vision_span()
        mask[a:b] = False
        return mask


# ------------------------------------------------------------------ methods


@dataclass(frozen=True)
class Method:
    """How a run configures the cache relative to the simulation's CacheConfig."""

    name: str
    wht: bool
    quantize: bool = True
    force_tier: Tier | None = None
    # None keeps the configured clip ratios; plain RTN uses 1.0.
    clip: float | None = None
    use_policies: bool = False
    use_pivots: bool = False


METHODS: dict[str, Method] = {
    m.name: m
    for m in (
        Method("exact", wht=False, quantize=False),
        Method("wht-only", wht=True, quantize=False),
        Method("fp16", wht=False, force_tier=Tier.FP16),
        Method("rtn-int4", wht=False, force_tier=Tier.INT4, clip=1.0),
        Method("rtn-int2", wht=False, force_tier=Tier.INT2, clip=1.0),
        Method("rtn-int2+wht", wht=True, force_tier=Tier.INT2, clip=1.0),
        Method("akvq-tsa", wht=True, use_policies=True, use_pivots=False),
        Method("akvq", wht=True, use_policies=True, use_pivots=True),
        Method("akvq-no-wht", wht=False, use_policies=True, use_pivots=True),
    )
}

# Ablation ladder: each step adds one component on top of the previous one.
ABLATION = ("rtn-int2", "rtn-int2+wht", "akvq-tsa", "akvq")


def method_cache_config(cfg: CacheConfig, method: Method) -> CacheConfig:
    changes: dict = dict(wht_enabled=method.wht,
                         quantize=method.quantize, force_tier=method.force_tier)
    if method.clip is not None:
        changes.update(clip_int2=method.clip, clip_int4=method.clip)
    return replace(cfg, **changes)


# --------------------------------------------------------------- synthetic data


@dataclass
class LayerStream:
    """Post-RoPE, pre-WHT tensors for one layer over all prompt + decode tokens."""

    q: np.ndarray  # (n_heads, T, d)
    k: np.ndarray  # (n_kv_heads, T, d)
    v: np.ndarray  # (n_kv_heads, T, d)


@dataclass
class SyntheticData:
    cfg: SimConfig
    is_text: np.ndarray
    pivot_positions: list[int]
    residual: np.ndarray  # (prefill, residual_dim)
    layers: list[LayerStream]


def _layer_rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *path])))


def _low_freq_direction(rng: np.random.Generator, d: int) -> np.ndarray:
    u = np.zeros(d)
    span = min(_LOW_FREQ_CHANNELS, d)
    u[d - span:] = rng.normal(size=span)
    return u / np.linalg.norm(u)


def _smooth_drift(rng: np.random.Generator, heads: int, tokens: int, d: int, span: float) -> np.ndarray:
    """AR(1) process over tokens with unit per-channel variance and correlation length ``span``."""
    rho = math.exp(-1.0 / span)
    eps = rng.normal(size=(heads, tokens, d))
    # Scale the first sample up so the filtered series starts at unit variance.
    s = math.sqrt(1.0 - rho * rho)
    eps[:, 0] /= s
    return lfilter([s], [1.0, -rho], eps, axis=1)


def hot_channel_keys(rng: np.random.Generator, tokens: int, d: int, n_hot: int = 2,
                     multiplier: float = 20.0) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian keys with ``n_hot`` channels scaled by ``multiplier``; returns (keys, hot channel indices)."""
    k = rng.normal(size=(tokens, d))
    hot = rng.choice(d, size=n_hot, replace=False)
    k[:, hot] *= multiplier
    return k.astype(np.float32), hot


def massive_residual(rng: np.random.Generator, tokens: int, hidden: int, positions: Sequence[int],
                     magnitude: float) -> np.ndarray:
    """Unit-Gaussian residual stream with one massive activation per listed token."""
    r = rng.normal(size=(tokens, hidden))
    for rank, p in enumerate(positions):
        channel = rng.integers(hidden)
        # Distinct magnitudes give a well-defined detection order.
        r[p, channel] = magnitude * (1.0 + 0.1 * rank) * rng.choice([-1.0, 1.0])
    return r.astype(np.float32)


def synthesize(cfg: SimConfig) -> SyntheticData:
    c = cfg.cache
    d, T, P = c.head_dim, cfg.total_tokens, cfg.seq_len_prefill
    is_text = cfg.is_text()
    rng = _layer_rng(cfg.seed, 0)

    a, b = cfg.vision_span()
    candidates = np.arange(max(a, 1), b)
    n_inj = min(cfg.n_injected_pivots, candidates.size)
    injected = sorted(int(i) for i in rng.choice(candidates, size=n_inj, replace=False)) if n_inj else []
    pivots = [0] + injected
    residual = massive_residual(rng, P, cfg.residual_dim, pivots, cfg.massive_magnitude)

    tsa = set(cfg.tsa_layers)
    sqrt_d = math.sqrt(d)
    positions = np.arange(T)
    layers = []
    for layer in range(c.n_layers):
        lr = _layer_rng(cfg.seed, 1, layer)
        q = lr.normal(size=(c.n_heads, T, d))
        k = lr.normal(size=(c.n_kv_heads, T, d))
        v = lr.normal(size=(c.n_kv_heads, T, d))
        for h in range(c.n_kv_heads):
            hot = lr.choice(d, size=cfg.hot_channels, replace=False)
            k[h][:, hot] *= cfg.hot_multiplier

        drift_amp = math.sqrt(cfg.local_bonus / sqrt_d)
        drift = _smooth_drift(lr, c.n_kv_heads, T, d, cfg.local_span)
        k += drift_amp * drift
        group = c.n_heads // c.n_kv_heads
        q += drift_amp * np.repeat(drift, group, axis=0)

        if layer in tsa:
            w = _low_freq_direction(lr, d)
            amp = math.sqrt(cfg.text_bonus * sqrt_d)
            k[:, is_text] += amp * w
            q += amp * w
        else:
            u = _low_freq_direction(lr, d)
            amp = math.sqrt(cfg.sink_bonus * sqrt_d)
            k[:, pivots] += amp * u
            q += amp * u

        layers.append(LayerStream(
            q=rope_apply(q.astype(np.float32), positions, cfg.rope_base),
            k=rope_apply(k.astype(np.float32), positions, cfg.rope_base),
            v=v.astype(np.float32),
        ))
    return SyntheticData(cfg, is_text, pivots, residual, layers)


# -------------------------------------------------------------------- metrics


@dataclass
class SimMetrics:
    method: str
    cosine: np.ndarray  # (layers, steps)
    max_err: np.ndarray
    rel_frob: np.ndarray
    key_mse: float
    value_mse: float
    memory: MemoryReport
    pivots: list[int] = field(default_factory=list)

    @property
    def mean_cosine(self) -> float:
        return float(self.cosine.mean())

    @property
    def min_cosine(self) -> float:
        return float(self.cosine.min())

    @property
    def mean_rel_frob(self) -> float:
        return float(self.rel_frob.mean())

    @property
    def max_abs_err(self) -> float:
        return float(self.max_err.max())

    def records(self) -> Iterable[str]:
        """One line per (layer, step): ``layer step cosine max_err rel_frob``."""
        for layer in range(self.cosine.shape[0]):
            for step in range(self.cosine.shape[1]):
                yield (f"{self.method} {layer} {step} {self.cosine[layer, step]:.9f} "
                       f"{self.max_err[layer, step]:.6e} {self.rel_frob[layer, step]:.6e}")

    def summary(self) -> dict[str, str]:
        m = self.memory
        return {
            "mean_cosine": f"{self.mean_cosine:.9f}",
            "min_cosine": f"{self.min_cosine:.9f}",
            "mean_rel_frob": f"{self.mean_rel_frob:.6e}",
            "max_abs_err": f"{self.max_abs_err:.6e}",
            "key_mse": f"{self.key_mse:.6e}",
            "value_mse": f"{self.value_mse:.6e}",
            "effective_bits": f"{m.effective_bits_per_element:.6f}",
            "compression_ratio": f"{m.compression_ratio_vs_fp16:.6f}",
            "pivots": ",".join(str(p) for p in self.pivots),
        }


def _step_metrics(out: np.ndarray, ref: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Cosine, max abs error and relative Frobenius error per step (leading axis)."""
    a = out.astype(np.float64).reshape(out.shape[0], -1)
    b = ref.astype(np.float64).reshape(ref.shape[0], -1)
    diff = a - b
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = na * nb
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(denom > 0, (a * b).sum(axis=1) / denom, np.where(na == nb, 1.0, 0.0))
    cos = np.clip(cos, -1.0, 1.0)
    max_err = np.abs(diff).max(axis=1)
    rel = np.linalg.norm(diff, axis=1) / np.maximum(nb, 1e-30)
    return cos, max_err, rel


# ------------------------------------------------------------------- pipeline


def _baseline_outputs(cfg: SimConfig, stream: LayerStream) -> np.ndarray:
    """Exact f32 outputs for every scored step: (steps, n_heads, d)."""
    P = cfg.seq_len_prefill
    q = stream.q[:, P - 1:]
    out = attention_forward(q, stream.k, stream.v, causal_offset=P - 1)
    return out.transpose(1, 0, 2)


def default_policies(cfg: SimConfig, pivots: Sequence[int]) -> list[LayerPolicy]:
    c = cfg.cache
    return build_policies(c.n_layers, cfg.tsa_layers, pivots, c.recent_window, c.n_pivot_max)


def _strip_pivots(policies: Sequence[LayerPolicy]) -> list[LayerPolicy]:
    return [replace(p, pivot_indices=frozenset()) for p in policies]


def _method_policies(method: Method, policies: Sequence[LayerPolicy], n_layers: int) -> list[LayerPolicy]:
    if not method.use_policies:
        return [LayerPolicy(i, Pattern.PSA, recent_window=0) for i in range(n_layers)]
    if not method.use_pivots:
        return _strip_pivots(policies)
    return list(policies)


class _Streams:
    """Stacked (L, heads, T, d) q/k/v, with the rotated copies built on first use."""

    def __init__(self, data: SyntheticData):
        self.plain = tuple(np.stack([getattr(s, n) for s in data.layers]) for n in "qkv")
        self._rotated = None

    def get(self, wht: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not wht:
            return self.plain
        if self._rotated is None:
            self._rotated = tuple(fwht(a) for a in self.plain)
        return self._rotated


def _run_method(data: SyntheticData, method: Method, policies: Sequence[LayerPolicy],
                baselines: np.ndarray, streams: _Streams | None = None) -> SimMetrics:
    cfg = data.cfg
    ccfg = method_cache_config(cfg.cache, method)
    P, S = cfg.seq_len_prefill, cfg.decode_steps
    L, H, d = ccfg.n_layers, ccfg.n_heads, ccfg.head_dim
    labels = data.is_text
    cache = MixedPrecisionKVCache(ccfg, _method_policies(method, policies, L), capacity=cfg.total_tokens)

    q, k, v = (streams or _Streams(data)).get(method.wht)

    cache.prefill(k[:, :, :P], v[:, :, :P], labels[:P])
    outs = np.empty((S + 1, L * H, d), np.float32)
    for step in range(S + 1):
        t = P - 1 + step
        if step:
            cache.append_decode(k[:, :, t], v[:, :, t], bool(labels[t]))
        view = cache.kv_view()
        n = view.shape[3]
        # Layers fold into the head axis; GQA grouping stays within a layer.
        keys = view[0].reshape(-1, n, d)
        values = view[1].reshape(-1, n, d)
        outs[step] = attention_forward(q[:, :, t].reshape(L * H, 1, d), keys, values, causal_offset=t)[:, 0]
    if method.wht:
        fwht_inplace(outs)
    outs = outs.reshape(S + 1, L, H * d).transpose(1, 0, 2)
    cos = np.empty((L, S + 1))
    max_err = np.empty_like(cos)
    rel = np.empty_like(cos)
    for layer in range(L):
        cos[layer], max_err[layer], rel[layer] = _step_metrics(outs[layer], baselines[layer])

    view = cache.kv_view()
    n_el = k.size
    k_mse = float(((view[0].astype(np.float64) - k) ** 2).sum()) / n_el
    v_mse = float(((view[1].astype(np.float64) - v) ** 2).sum()) / n_el
    return SimMetrics(
        method=method.name,
        cosine=cos,
        max_err=max_err,
        rel_frob=rel,
        key_mse=k_mse,
        value_mse=v_mse,
        memory=cache.memory_report(),
        pivots=sorted({i for p in policies for i in p.pivot_indices}) if method.use_pivots else [],
    )


def run_comparison(cfg: SimConfig, methods: Sequence[str] = ABLATION,
                   policies: Sequence[LayerPolicy] | None = None) -> dict[str, SimMetrics]:
    """Run several methods on one shared synthetic stream; keyed by method name."""
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ParameterError(f"unknown methods {unknown}; choose from {sorted(METHODS)}")
    data = synthesize(cfg)
    if policies is None:
        pivots = detect_pivot_tokens(data.residual, cfg.tau, cfg.cache.n_pivot_max)
        policies = default_policies(cfg, pivots)
    elif len(policies) != cfg.cache.n_layers:
        raise ParameterError(f"{len(policies)} policies for {cfg.cache.n_layers} layers")
    else:
        policies = sorted(policies, key=lambda p: p.layer_index)
    baselines = np.stack([_baseline_outputs(cfg, s).reshape(cfg.decode_steps + 1, -1) for s in data.layers])
    streams = _Streams(data)
    return {m: _run_method(data, METHODS[m], policies, baselines, streams) for m in methods}


def run_pipeline(cfg: SimConfig, policies: Sequence[LayerPolicy] | None = None,
                 method: str = "akvq") -> SimMetrics:
    """Baseline vs. one method; policies default to the configured TSA layers plus detected pivots."""
    return run_comparison(cfg, [method], policies)[method]
