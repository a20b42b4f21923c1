"""Salient-token identification and the attention statistics behind it.

Layers follow one of two patterns. In text-salient (TSA) layers text tokens
draw more attention than vision tokens, so text is kept at 4 bits. In
pivot-salient (PSA) layers a handful of pivot tokens, located through massive
activations in the residual stream, absorb most of the attention and are kept
at 16 bits. The trailing ``recent_window`` tokens stay at 16 bits in every
layer; everything else drops to 2 bits.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, InputError, ParameterError

log = logging.getLogger(__name__)

DEFAULT_RECENT_WINDOW = 128
DEFAULT_N_PIVOT_MAX = 15
DEFAULT_TAU = 50.0
DEFAULT_GAMMA = 2.0
DEFAULT_EXCLUDED_PREFIX = 5


class Modality(str, enum.Enum):
    TEXT = "text"
    VISION = "vision"


class Pattern(str, enum.Enum):
    TSA = "TSA"
    PSA = "PSA"


class Tier(enum.IntEnum):
    """Storage tier; the value is the bit width."""

    INT2 = 2
    INT4 = 4
    FP16 = 16


_LABEL_ALIASES = {"text": True, "t": True, "1": True, "vision": False, "v": False, "image": False, "0": False}


def text_mask(modality) -> np.ndarray:
    """Boolean ``is_text`` array from labels (Modality, 'text'/'vision', 't'/'v' or bools)."""
    if isinstance(modality, np.ndarray) and modality.dtype == bool:
        return modality.copy()
    out = []
    for label in modality:
        if isinstance(label, (bool, np.bool_)):
            out.append(bool(label))
            continue
        key = label.value if isinstance(label, Modality) else str(label).strip().lower()
        if key not in _LABEL_ALIASES:
            raise InputError(f"unknown modality label {label!r}")
        out.append(_LABEL_ALIASES[key])
    return np.array(out, dtype=bool)


@dataclass(frozen=True)
class TokenMeta:
    index: int
    modality: Modality
    tier: Tier


@dataclass(frozen=True)
class LayerPolicy:
    layer_index: int
    pattern: Pattern
    pivot_indices: frozenset[int] = frozenset()
    recent_window: int = DEFAULT_RECENT_WINDOW
    n_pivot_max: int = DEFAULT_N_PIVOT_MAX
    # Keep text at int4 in PSA layers too (off by default; experimental).
    text_int4_in_psa: bool = False

    def __post_init__(self):
        object.__setattr__(self, "pattern", Pattern(self.pattern))
        object.__setattr__(self, "pivot_indices", frozenset(int(i) for i in self.pivot_indices))
        if self.recent_window < 0:
            raise ParameterError(f"recent_window must be >= 0, got {self.recent_window}")
        if self.n_pivot_max < 0:
            raise ParameterError(f"n_pivot_max must be >= 0, got {self.n_pivot_max}")
        if self.pivot_indices and self.pattern is not Pattern.PSA:
            raise ParameterError("pivot indices are only allowed in PSA layers")
        if len(self.pivot_indices) > self.n_pivot_max:
            raise ParameterError(f"{len(self.pivot_indices)} pivots exceed n_pivot_max={self.n_pivot_max}")
        if any(i < 0 for i in self.pivot_indices):
            raise ParameterError("pivot indices must be non-negative")


@dataclass
class ModalityAttentionStats:
    """Per-head mean attention received by text and vision keys. ``None`` marks an absent modality."""

    text_mean: np.ndarray | None
    vision_mean: np.ndarray | None
    excluded_prefix: int = DEFAULT_EXCLUDED_PREFIX

    @property
    def complete(self) -> bool:
        return self.text_mean is not None and self.vision_mean is not None


# ----------------------------------------------------------------------- analysis


def modality_attention_stats(attn, modality, excluded_prefix: int = DEFAULT_EXCLUDED_PREFIX,
                             atol: float = 1e-4) -> ModalityAttentionStats:
    """Average attention each modality receives, per head.

    ``attn`` is ``(heads, query_tokens, key_tokens)`` with rows summing to 1.
    Keys with index below ``excluded_prefix`` (attention sinks) are dropped.
    """
    attn = np.asarray(attn, dtype=np.float64)
    if attn.ndim != 3:
        raise InputError(f"attention must be heads x queries x keys, got shape {attn.shape}")
    is_text = text_mask(modality)
    n_keys = attn.shape[2]
    if is_text.shape[0] != n_keys:
        raise InputError(f"{is_text.shape[0]} labels for {n_keys} key tokens")
    if excluded_prefix < 0:
        raise InputError("excluded_prefix must be >= 0")
    if excluded_prefix >= n_keys:
        raise InputError(f"excluded_prefix {excluded_prefix} leaves no key tokens out of {n_keys}")
    sums = attn.sum(axis=2)
    if np.any(np.abs(sums - 1.0) > atol):
        raise InputError("attention rows must sum to 1")

    keep = np.arange(n_keys) >= excluded_prefix
    received = attn.mean(axis=1)  # heads x keys, averaged over queries

    def _mean(mask):
        if not mask.any():
            return None
        return received[:, mask].mean(axis=1)

    return ModalityAttentionStats(
        text_mean=_mean(keep & is_text),
        vision_mean=_mean(keep & ~is_text),
        excluded_prefix=excluded_prefix,
    )


def detect_tsa_layers(stats_per_layer: Sequence[ModalityAttentionStats], gamma: float = DEFAULT_GAMMA) -> set[int]:
    """Layers whose head-averaged text attention exceeds ``gamma`` times the vision attention."""
    if not gamma > 1:
        raise ParameterError(f"gamma must be > 1, got {gamma}")
    tsa = set()
    for layer, st in enumerate(stats_per_layer):
        if not st.complete:
            log.warning("layer %d: a modality has no tokens after exclusion; skipped", layer)
            continue
        if float(np.mean(st.text_mean)) > gamma * float(np.mean(st.vision_mean)):
            tsa.add(layer)
    return tsa


def massive_activation_scores(residual) -> np.ndarray:
    r = np.asarray(residual, dtype=np.float64)
    if r.ndim != 2 or r.shape[0] < 1:
        raise InputError(f"residual must be tokens x hidden, got shape {r.shape}")
    return np.abs(r).max(axis=1)


def detect_pivot_tokens(residual, tau: float = DEFAULT_TAU, n_pivot_max: int = DEFAULT_N_PIVOT_MAX) -> list[int]:
    """Tokens carrying massive activations, strongest first.

    A token qualifies when its peak |activation| exceeds ``tau`` times the
    median peak over all tokens. Falls back to ``[0]`` (the attention sink)
    when nothing qualifies.
    """
    if not tau > 1:
        raise ParameterError(f"tau must be > 1, got {tau}")
    score = massive_activation_scores(residual)
    threshold = tau * np.median(score)
    hits = np.flatnonzero(score > threshold)
    if hits.size == 0:
        return [0]
    order = hits[np.argsort(-score[hits], kind="stable")]
    return [int(i) for i in order[:n_pivot_max]]


# ------------------------------------------------------------------ classification


def base_tiers(positions, is_text, policy: LayerPolicy) -> np.ndarray:
    """Tier of each token once it is outside the recent window."""
    positions = np.asarray(positions, dtype=np.int64)
    is_text = np.asarray(is_text, dtype=bool)
    tiers = np.full(positions.shape, int(Tier.INT2), dtype=np.int8)
    if policy.pattern is Pattern.TSA or policy.text_int4_in_psa:
        tiers[is_text] = Tier.INT4
    if policy.pattern is Pattern.PSA and policy.pivot_indices:
        pivots = np.fromiter(policy.pivot_indices, dtype=np.int64)
        tiers[np.isin(positions, pivots)] = Tier.FP16
    return tiers


def classify_tokens(seq_len: int, modality, policy: LayerPolicy) -> np.ndarray:
    """Tier (bit width, int8) for every token of a ``seq_len``-token sequence under ``policy``."""
    is_text = text_mask(modality)
    if is_text.shape[0] != seq_len:
        raise InputError(f"{is_text.shape[0]} labels for seq_len {seq_len}")
    if any(i >= seq_len for i in policy.pivot_indices):
        raise ParameterError(f"pivot index beyond sequence length {seq_len}")
    tiers = base_tiers(np.arange(seq_len), is_text, policy)
    if policy.recent_window:
        tiers[max(0, seq_len - policy.recent_window):] = Tier.FP16
    return tiers


def token_meta(seq_len: int, modality, policy: LayerPolicy) -> list[TokenMeta]:
    is_text = text_mask(modality)
    tiers = classify_tokens(seq_len, is_text, policy)
    return [
        TokenMeta(i, Modality.TEXT if is_text[i] else Modality.VISION, Tier(int(tiers[i])))
        for i in range(seq_len)
    ]


# ---------------------------------------------------------------- policy building


# Layer patterns observed for several VLMs: (TSA layers, total layers).
KNOWN_MODEL_PATTERNS: dict[str, tuple[range, int]] = {
    "llava-v1.5-7b": (range(0, 2), 32),
    "llava-v1.5-13b": (range(0, 2), 32),
    "llava-v1.6-vicuna-7b": (range(0, 2), 32),
    "llava-v1.6-mistral-7b": (range(0, 0), 32),
    "qwen2-vl-7b": (range(0, 2), 28),
}


def build_policies(n_layers: int, tsa_layers: Iterable[int], pivots: Iterable[int] = (),
                   recent_window: int = DEFAULT_RECENT_WINDOW, n_pivot_max: int = DEFAULT_N_PIVOT_MAX,
                   text_int4_in_psa: bool = False) -> list[LayerPolicy]:
    tsa = set(tsa_layers)
    if any(not 0 <= i < n_layers for i in tsa):
        raise ParameterError(f"TSA layer index out of range for {n_layers} layers")
    pivots = frozenset(list(pivots)[:n_pivot_max])
    return [
        LayerPolicy(
            layer_index=i,
            pattern=Pattern.TSA if i in tsa else Pattern.PSA,
            pivot_indices=frozenset() if i in tsa else pivots,
            recent_window=recent_window,
            n_pivot_max=n_pivot_max,
            text_int4_in_psa=text_int4_in_psa,
        )
        for i in range(n_layers)
    ]


def model_policies(model: str, pivots: Iterable[int] = (), **kwargs) -> list[LayerPolicy]:
    try:
        tsa, n_layers = KNOWN_MODEL_PATTERNS[model.lower()]
    except KeyError:
        raise ParameterError(f"unknown model {model!r}; known: {sorted(KNOWN_MODEL_PATTERNS)}") from None
    return build_policies(n_layers, tsa, pivots, **kwargs)


# ------------------------------------------------------------------- policy files


@dataclass
class PolicyFile:
    """Contents of a policy text file.

    Grammar (one ``key = value`` per line, ``#`` starts a comment)::

        n_layers = 32
        recent_window = 128
        n_pivot_max = 15
        tau = 50
        gamma = 2.0
        text_int4_in_psa = false
        pivots = 0, 57
        layers.0-1 = TSA
        layers.2-31 = PSA

    ``layers.<i>`` or ``layers.<a>-<b>`` (inclusive) assigns a pattern. Every
    layer in ``[0, n_layers)`` must be covered exactly once.
    """

    n_layers: int
    patterns: dict[int, Pattern]
    pivots: list[int] = field(default_factory=list)
    recent_window: int = DEFAULT_RECENT_WINDOW
    n_pivot_max: int = DEFAULT_N_PIVOT_MAX
    tau: float = DEFAULT_TAU
    gamma: float = DEFAULT_GAMMA
    text_int4_in_psa: bool = False

    def policies(self) -> list[LayerPolicy]:
        tsa = [i for i, p in self.patterns.items() if p is Pattern.TSA]
        return build_policies(self.n_layers, tsa, self.pivots, self.recent_window, self.n_pivot_max,
                              self.text_int4_in_psa)


def _compress_ranges(layers: list[int]) -> list[tuple[int, int]]:
    out: list[tuple[int, int]] = []
    for i in sorted(layers):
        if out and out[-1][1] == i - 1:
            out[-1] = (out[-1][0], i)
        else:
            out.append((i, i))
    return out


def format_policy_file(pf: PolicyFile) -> str:
    lines = [
        f"n_layers = {pf.n_layers}",
        f"recent_window = {pf.recent_window}",
        f"n_pivot_max = {pf.n_pivot_max}",
        f"tau = {pf.tau:g}",
        f"gamma = {pf.gamma:g}",
        f"text_int4_in_psa = {'true' if pf.text_int4_in_psa else 'false'}",
        f"pivots = {', '.join(str(i) for i in pf.pivots)}",
    ]
    for pattern in (Pattern.TSA, Pattern.PSA):
        for a, b in _compress_ranges([i for i, p in pf.patterns.items() if p is pattern]):
            key = f"layers.{a}" if a == b else f"layers.{a}-{b}"
            lines.append(f"{key} = {pattern.value}")
    return "\n".join(lines) + "\n"


def parse_policy_file(text: str) -> PolicyFile:
    values: dict[str, str] = {}
    patterns: dict[int, Pattern] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("layers."):
            span = key[len("layers."):]
            try:
                a, _, b = span.partition("-")
                lo, hi = int(a), int(b or a)
                pattern = Pattern(value.upper())
            except ValueError:
                raise FormatError(f"line {lineno}: bad layer assignment {raw.strip()!r}") from None
            for i in range(lo, hi + 1):
                if i in patterns:
                    raise FormatError(f"line {lineno}: layer {i} assigned twice")
                patterns[i] = pattern
        else:
            values[key] = value

    known = {"n_layers", "recent_window", "n_pivot_max", "tau", "gamma", "text_int4_in_psa", "pivots"}
    unknown = set(values) - known
    if unknown:
        raise FormatError(f"unknown keys: {sorted(unknown)}")
    try:
        n_layers = int(values.get("n_layers", max(patterns, default=-1) + 1))
        pivots = [int(s) for s in values.get("pivots", "").replace(",", " ").split()]
        pf = PolicyFile(
            n_layers=n_layers,
            patterns=patterns,
            pivots=pivots,
            recent_window=int(values.get("recent_window", DEFAULT_RECENT_WINDOW)),
            n_pivot_max=int(values.get("n_pivot_max", DEFAULT_N_PIVOT_MAX)),
            tau=float(values.get("tau", DEFAULT_TAU)),
            gamma=float(values.get("gamma", DEFAULT_GAMMA)),
            text_int4_in_psa=values.get("text_int4_in_psa", "false").lower() in ("1", "true", "yes"),
        )
    except ValueError as exc:
        raise FormatError(f"bad policy value: {exc}") from None
    if sorted(patterns) != list(range(n_layers)):
        raise FormatError(f"layer patterns must cover 0..{n_layers - 1} exactly")
    return pf
