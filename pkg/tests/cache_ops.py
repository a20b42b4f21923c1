"""Randomized operation sequences for the cache invariant checks."""

import numpy as np

from akvq.kvcache import CacheConfig, MixedPrecisionKVCache
from akvq.saliency import LayerPolicy, Pattern, Tier


def random_setup(rng: np.random.Generator):
    """A small random config, per-layer policies and a token stream."""
    n_layers = int(rng.integers(1, 4))
    n_kv = int(rng.integers(1, 3))
    d = int(rng.choice([4, 8, 16]))
    group = int(rng.choice([4, 8, 16]))
    cfg = CacheConfig(n_layers, n_kv * int(rng.integers(1, 3)), n_kv, d, group_size=group,
                      recent_window=int(rng.integers(0, 6)))
    total = int(rng.integers(1, 40))
    policies = []
    for layer in range(n_layers):
        window = int(rng.integers(0, 6))
        if rng.random() < 0.4:
            policies.append(LayerPolicy(layer, Pattern.TSA, recent_window=window))
        else:
            k = int(rng.integers(0, min(total, 4) + 1))
            piv = rng.choice(total, size=k, replace=False).tolist()
            policies.append(LayerPolicy(layer, Pattern.PSA, frozenset(piv), recent_window=window))
    scale = rng.uniform(0.1, 10, size=(n_layers, n_kv, 1, 1))
    keys = (rng.normal(size=(n_layers, n_kv, total, d)) * scale).astype(np.float32)
    values = rng.normal(size=(n_layers, n_kv, total, d)).astype(np.float32)
    if rng.random() < 0.3:
        keys[:, :, rng.integers(total)] = 3.0  # constant rows hit the degenerate path
    labels = rng.random(total) < 0.4
    return cfg, policies, keys, values, labels


def check_partition(cache: MixedPrecisionKVCache) -> None:
    cache.validate()
    for layer in range(cache.cfg.n_layers):
        regions = cache.region_indices(layer)
        merged = np.sort(np.concatenate(list(regions.values())))
        assert np.array_equal(merged, np.arange(cache.length))


def same_contents(a: MixedPrecisionKVCache, b: MixedPrecisionKVCache) -> None:
    assert a.length == b.length
    assert a.kv_view().tobytes() == b.kv_view().tobytes()
    for layer in range(a.cfg.n_layers):
        ta, tb = a.token_tiers(layer), b.token_tiers(layer)
        assert np.array_equal(ta, tb)
        for tok in np.flatnonzero(ta != Tier.FP16):
            for h in range(a.cfg.n_kv_heads):
                for which in (0, 1):
                    assert a.quantized_row(layer, h, tok, which) == b.quantized_row(layer, h, tok, which)


def run_sequence(seed: int) -> int:
    """Append a random stream while checking invariants; returns operations performed.

    Operations are appends, view reads and partition checks. At the end the
    appended cache is compared against a single prefill of the same tokens.
    """
    rng = np.random.default_rng(seed)
    cfg, policies, keys, values, labels = random_setup(rng)
    cache = MixedPrecisionKVCache(cfg, policies, capacity=int(rng.integers(1, 8)))
    ops = 0
    for t in range(keys.shape[2]):
        cache.append_decode(keys[:, :, t], values[:, :, t], bool(labels[t]))
        ops += 1
        layer = int(rng.integers(cfg.n_layers))
        head = int(rng.integers(cfg.n_kv_heads))
        k1, v1 = cache.dequantized_view(layer, head)
        k2, v2 = cache.dequantized_view(layer, head)
        assert k1.tobytes() == k2.tobytes() and v1.tobytes() == v2.tobytes()
        ops += 2
        check_partition(cache)
        ops += 1
    bulk = MixedPrecisionKVCache(cfg, policies)
    bulk.prefill(keys, values, labels)
    check_partition(bulk)
    same_contents(cache, bulk)
    return ops + 2
