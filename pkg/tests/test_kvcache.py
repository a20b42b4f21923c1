import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from akvq.errors import ParameterError, ShapeError, StateError
from akvq.kvcache import CacheConfig, MixedPrecisionKVCache, memory_from_counts
from akvq.quantizer import QuantParams, fake_quantize
from akvq.saliency import LayerPolicy, Pattern, Tier
from akvq.tensor_io import load_tensor, round_f16
from cache_ops import check_partition, run_sequence
from oracles import memory_bits, scalar_quantize


def _psa(layer=0, pivots=(), window=128):
    return LayerPolicy(layer, Pattern.PSA, frozenset(pivots), recent_window=window)


def _rows(seed, layers, heads, tokens, d, scale=1.0):
    rng = np.random.default_rng(seed)
    return (rng.normal(size=(layers, heads, tokens, d)) * scale).astype(np.float32)


# ------------------------------------------------------------------ construction


def test_empty_cache():
    cache = MixedPrecisionKVCache(CacheConfig(2, 1, 1, 4))
    assert cache.length == 0
    r = cache.memory_report()
    assert (r.bytes_fp16, r.bytes_int4, r.bytes_int2, r.bytes_overhead) == (0, 0, 0, 0)
    assert r.compression_ratio_vs_fp16 == 1.0


def test_config_guards():
    with pytest.raises(ParameterError):
        CacheConfig(1, 1, 1, 6)
    CacheConfig(1, 1, 1, 6, wht_enabled=False)
    with pytest.raises(ParameterError):
        CacheConfig(1, 3, 2, 8)
    with pytest.raises(ParameterError):
        CacheConfig(1, 1, 1, 8, clip_int2=0.0)
    cfg = CacheConfig(1, 8, 2, 8)
    assert [cfg.kv_head_for(h) for h in range(8)] == [0, 0, 0, 0, 1, 1, 1, 1]


def test_policy_coverage():
    with pytest.raises(ParameterError):
        MixedPrecisionKVCache(CacheConfig(2, 1, 1, 4), [_psa(0)])
    with pytest.raises(ParameterError):
        MixedPrecisionKVCache(CacheConfig(1, 1, 1, 4), [_psa(0), _psa(0)])


# ------------------------------------------------------------------ prefill


def test_prefill_window_covers_all():
    cfg = CacheConfig(1, 1, 1, 8)
    keys = _rows(0, 1, 1, 4, 8)
    values = _rows(1, 1, 1, 4, 8)
    cache = MixedPrecisionKVCache(cfg, [_psa()])
    cache.prefill(keys, values, ["v"] * 4)
    k, v = cache.dequantized_view(0, 0)
    assert k.tobytes() == round_f16(keys[0, 0]).tobytes()
    assert v.tobytes() == round_f16(values[0, 0]).tobytes()
    assert np.all(cache.token_tiers(0) == Tier.FP16)


def test_prefill_psa_300_tokens():
    cfg = CacheConfig(1, 1, 1, 128)
    keys = _rows(2, 1, 1, 300, 128, 3.0)
    values = _rows(3, 1, 1, 300, 128)
    cache = MixedPrecisionKVCache(cfg, [_psa(pivots={0})])
    cache.prefill(keys, values, ["v"] * 300)
    k, _ = cache.dequantized_view(0, 0)
    src = round_f16(keys[0, 0])
    exact = [0] + list(range(172, 300))
    assert k[exact].tobytes() == src[exact].tobytes()
    for t in range(1, 172):
        row = src[t]
        lo, hi = 0.8 * float(row.min()), 0.8 * float(row.max())
        inside = (row >= lo) & (row <= hi)
        scale = cache.quantized_row(0, 0, t).groups[0].scale
        assert np.all(np.abs(k[t, inside] - row[inside]) <= scale / 2 + 1e-6)


def test_prefill_tsa_text_gets_int4():
    cfg = CacheConfig(1, 1, 1, 128)
    keys = _rows(4, 1, 1, 300, 128, 2.0)
    cache = MixedPrecisionKVCache(cfg, [LayerPolicy(0, Pattern.TSA)])
    cache.prefill(keys, keys, ["t"] * 100 + ["v"] * 200)
    tiers = cache.token_tiers(0)
    assert np.all(tiers[:100] == Tier.INT4)
    src = round_f16(keys[0, 0, :100])
    k, _ = cache.dequantized_view(0, 0)
    mse4 = float(((k[:100] - src) ** 2).mean())
    mse2 = float(((fake_quantize(src, QuantParams(2, 0.8)) - src) ** 2).mean())
    assert mse4 < mse2


def test_prefill_errors():
    cfg = CacheConfig(1, 1, 1, 4)
    cache = MixedPrecisionKVCache(cfg, [_psa()])
    with pytest.raises(ShapeError):
        cache.prefill(np.zeros((1, 1, 3, 8)), np.zeros((1, 1, 3, 8)), ["t"] * 3)
    with pytest.raises(ShapeError):
        cache.prefill(np.zeros((1, 1, 3, 4)), np.zeros((1, 1, 3, 4)), ["t"] * 2)
    cache.prefill(np.zeros((1, 1, 3, 4)), np.zeros((1, 1, 3, 4)), ["t"] * 3)
    with pytest.raises(StateError):
        cache.prefill(np.zeros((1, 1, 3, 4)), np.zeros((1, 1, 3, 4)), ["t"] * 3)


# ------------------------------------------------------------------ decode


def test_append_first_token():
    cache = MixedPrecisionKVCache(CacheConfig(2, 1, 1, 4), [_psa(0), _psa(1)])
    cache.append_decode(np.ones((2, 1, 4)), np.ones((2, 1, 4)), "t")
    assert cache.length == 1
    assert cache.token_tiers(0).tolist() == [Tier.FP16]
    with pytest.raises(ShapeError):
        cache.append_decode(np.ones((2, 1, 5)), np.ones((2, 1, 5)), "t")


def test_window_eviction_trace():
    cfg = CacheConfig(1, 1, 1, 8)
    cache = MixedPrecisionKVCache(cfg, [_psa(window=2)])
    rows = _rows(5, 1, 1, 5, 8)
    seen = []
    for t in range(5):
        cache.append_decode(rows[:, :, t], rows[:, :, t], "v")
        seen.append(cache.token_tiers(0).tolist())
    assert seen[1] == [16, 16]
    assert seen[2] == [2, 16, 16]
    assert seen[4] == [2, 2, 2, 16, 16]


def test_pivot_survives_eviction():
    cache = MixedPrecisionKVCache(CacheConfig(1, 1, 1, 8), [_psa(pivots={1}, window=2)])
    rows = _rows(6, 1, 1, 5, 8)
    for t in range(5):
        cache.append_decode(rows[:, :, t], rows[:, :, t], "v")
    assert cache.token_tiers(0).tolist() == [2, 16, 2, 16, 16]
    k, _ = cache.dequantized_view(0, 0)
    assert k[1].tobytes() == round_f16(rows[0, 0, 1]).tobytes()


# ------------------------------------------------------------------ views


def test_constant_row_exact():
    cache = MixedPrecisionKVCache(CacheConfig(1, 1, 1, 8), [_psa(window=0)])
    cache.prefill(np.full((1, 1, 1, 8), 2.5), np.full((1, 1, 1, 8), -1.5), ["v"])
    assert cache.token_tiers(0).tolist() == [Tier.INT2]
    k, v = cache.dequantized_view(0, 0)
    np.testing.assert_array_equal(k, np.full((1, 8), 2.5))
    np.testing.assert_array_equal(v, np.full((1, 8), -1.5))


def test_int2_view_matches_scalar_oracle():
    cfg = CacheConfig(1, 1, 1, 128)
    keys = _rows(7, 1, 1, 300, 128, 4.0)
    cache = MixedPrecisionKVCache(cfg, [_psa(pivots={0})])
    cache.prefill(keys, keys, ["v"] * 300)
    k, _ = cache.dequantized_view(0, 0)
    src = round_f16(keys[0, 0])
    for t in range(1, 172):
        codes, scale, zero = scalar_quantize(src[t], 2, 0.8)
        ref = np.array([np.float32(scale * (c - zero)) for c in codes], np.float32)
        assert k[t].tobytes() == ref.tobytes()


def test_view_errors_and_readonly():
    cache = MixedPrecisionKVCache(CacheConfig(1, 2, 2, 4), [_psa()])
    cache.append_decode(np.ones((1, 2, 4)), np.ones((1, 2, 4)), "t")
    with pytest.raises(ParameterError):
        cache.dequantized_view(1, 0)
    with pytest.raises(ParameterError):
        cache.dequantized_view(0, 2)
    with pytest.raises(ValueError):
        cache.layer_view(0)[0, 0, 0, 0] = 1.0
    assert cache.kv_view().shape == (2, 1, 2, 1, 4)


# ------------------------------------------------------------------ memory


def _pure_int2(tokens, d=128):
    cfg = CacheConfig(1, 1, 1, d, force_tier=Tier.INT2)
    cache = MixedPrecisionKVCache(cfg)
    x = _rows(8, 1, 1, tokens, d)
    cache.prefill(x, x, ["v"] * tokens)
    return cache


def test_pure_int2_memory():
    r = _pure_int2(10).memory_report()
    assert r.effective_bits_per_element == 2.5
    assert r.compression_ratio_vs_fp16 == 6.4
    assert r.total_bytes == 10 * 2 * (128 * 0.25 + 8)


def test_mixed_psa_memory():
    cache = MixedPrecisionKVCache(CacheConfig(1, 1, 1, 128), [_psa(pivots={0})])
    x = _rows(9, 1, 1, 300, 128)
    cache.prefill(x, x, ["v"] * 300)
    r = cache.memory_report()
    assert abs(r.effective_bits_per_element - memory_bits(129, 0, 171, 128, 128)) <= 1e-9
    assert abs(r.effective_bits_per_element - 8.305) <= 1e-9
    assert r.compression_ratio_vs_fp16 == pytest.approx(1.93, abs=5e-3)


def test_memory_report_invariants():
    r = memory_from_counts(7, 5, 11, 96, 64)
    assert r.effective_bits_per_element == pytest.approx(8 * r.total_bytes / r.total_elements)
    assert r.compression_ratio_vs_fp16 == pytest.approx(16 / r.effective_bits_per_element)
    assert r.effective_bits_per_element == pytest.approx(memory_bits(7, 5, 11, 96, 64))


# ------------------------------------------------------------------ snapshots


def test_dump_snapshot(tmp_path):
    cache = MixedPrecisionKVCache(CacheConfig(1, 1, 1, 8), [_psa(pivots={0}, window=1)])
    x = _rows(10, 1, 1, 4, 8)
    cache.prefill(x, x, ["v"] * 4)
    out = cache.dump_snapshot(tmp_path / "snap")
    manifest = (out / "manifest.txt").read_text().splitlines()
    assert "0 0 fp16 k l0_h0_fp16_k.akv 0,3" in manifest
    assert "0 0 int2 k l0_h0_int2_k.akv 1,2" in manifest
    k, _ = cache.dequantized_view(0, 0)
    np.testing.assert_array_equal(load_tensor(out / "l0_h0_int2_k.akv"), k[[1, 2]])


# ------------------------------------------------------------------ invariants


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_operation_sequences(seed):
    assert run_sequence(seed) > 0


def test_partition_after_prefill_then_decode():
    cfg = CacheConfig(2, 2, 1, 16, group_size=8)
    pols = [LayerPolicy(0, Pattern.TSA, recent_window=3), _psa(1, pivots={2, 5}, window=4)]
    cache = MixedPrecisionKVCache(cfg, pols)
    x = _rows(11, 2, 1, 20, 16)
    cache.prefill(x[:, :, :10], x[:, :, :10], ["t", "v"] * 5)
    for t in range(10, 20):
        cache.append_decode(x[:, :, t], x[:, :, t], "v")
        check_partition(cache)
    ref = MixedPrecisionKVCache(cfg, pols)
    ref.prefill(x, x, ["t", "v"] * 5 + ["v"] * 10)
    assert cache.kv_view().tobytes() == ref.kv_view().tobytes()
