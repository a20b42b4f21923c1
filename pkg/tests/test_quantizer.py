import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from akvq.errors import LengthError, NumericError, ParameterError
from akvq.quantizer import (
    QuantParams,
    clipped_range,
    dequantize_group,
    dequantize_row,
    dequantize_rows,
    effective_bits,
    fake_quantize,
    pack_codes,
    quantize_group,
    quantize_row,
    quantize_rows,
    unpack_codes,
)
from oracles import nearest_codes, scalar_quantize

finite32 = st.floats(-1e4, 1e4, width=32, allow_nan=False, allow_infinity=False)


# ------------------------------------------------------------------ params


@pytest.mark.parametrize("kwargs", [dict(bits=3), dict(bits=2, clip_ratio=0.0),
                                    dict(bits=4, clip_ratio=1.5), dict(bits=2, group_size=0)])
def test_params_validation(kwargs):
    with pytest.raises(ParameterError):
        QuantParams(**kwargs)


def test_clipped_range():
    assert clipped_range([-10, 4], 1.0) == (-10, 4)
    lo, hi = clipped_range([-10, 4], 0.8)
    assert lo == pytest.approx(-8) and hi == pytest.approx(3.2)
    assert clipped_range([5, 5, 5], 0.8) == pytest.approx((4, 4))
    with pytest.raises(ParameterError):
        clipped_range([], 0.8)


# ------------------------------------------------------------------ packing


def test_pack_examples():
    assert pack_codes([3, 0, 1, 2], 2).tobytes() == b"\x93"
    assert pack_codes([0xA, 0x5], 4).tobytes() == b"\x5a"
    assert pack_codes([1, 1, 1], 2).tobytes() == b"\x15"  # trailing bits zero


def test_unpack_examples():
    assert unpack_codes(b"\x93", 4, 2).tolist() == [3, 0, 1, 2]
    assert unpack_codes(b"\x5a", 2, 4).tolist() == [0xA, 0x5]
    assert unpack_codes(b"\x00", 1, 2).tolist() == [0]


def test_pack_errors():
    with pytest.raises(ParameterError):
        pack_codes([4], 2)
    with pytest.raises(ParameterError):
        pack_codes([-1], 4)
    with pytest.raises(ParameterError):
        pack_codes([1], 3)
    with pytest.raises(LengthError):
        unpack_codes(b"\x00", 5, 2)


@settings(max_examples=200)
@given(st.sampled_from([2, 4]), st.data())
def test_pack_round_trip(bits, data):
    codes = data.draw(st.lists(st.integers(0, (1 << bits) - 1), min_size=0, max_size=300))
    packed = pack_codes(np.array(codes, dtype=np.int64), bits)
    assert packed.shape[-1] == -(-len(codes) * bits // 8)
    assert unpack_codes(packed.tobytes(), len(codes), bits).tolist() == codes


# ------------------------------------------------------------------ quantize


def test_group_0123():
    g = quantize_group([0, 1, 2, 3], QuantParams(2, 1.0))
    assert (g.scale, g.zero) == (1.0, 0)
    assert g.unpacked()[:4].tolist() == [0, 1, 2, 3]
    np.testing.assert_array_equal(dequantize_group(g), [0, 1, 2, 3])


@pytest.mark.parametrize("bits", [2, 4])
@pytest.mark.parametrize("c", [5.0, 0.0, -5.0, 1e-20, -0.3])
def test_degenerate_constant_group(bits, c):
    g = quantize_group([c] * 4, QuantParams(bits, 1.0))
    assert g.scale >= 0
    np.testing.assert_array_equal(dequantize_group(g), np.float32([c] * 4))
    if c >= 0:
        assert (g.scale, g.zero) == (np.float32(c), 0)
        assert g.unpacked()[:4].tolist() == [1, 1, 1, 1]


def test_degenerate_dequant_direct():
    g = quantize_group([5, 5], QuantParams(2, 1.0))
    assert g.scale == 5.0 and g.zero == 0
    np.testing.assert_array_equal(dequantize_group(g), [5, 5])


def test_clipped_saturation_example():
    x = np.float32([-10, -1, 0, 1, 10])
    g = quantize_group(x, QuantParams(4, 0.8))
    codes = g.unpacked()[:5]
    # frozen from the scalar oracle
    ref_codes, ref_scale, ref_zero = scalar_quantize(x, 4, 0.8)
    assert codes.tolist() == ref_codes == [0, 6, 7, 8, 15]
    assert g.scale == pytest.approx(ref_scale) and g.zero == ref_zero == 7
    recon = dequantize_group(g)
    inside = np.abs(x) <= 8
    assert np.all(np.abs(recon[inside] - x[inside]) <= g.scale / 2 + 1e-6)


def test_uniform_group_error_bound():
    rng = np.random.default_rng(5)
    x = rng.uniform(-1, 1, 128).astype(np.float32)
    p = QuantParams(2, 0.8)
    g = quantize_group(x, p)
    recon = dequantize_group(g)
    inside = np.abs(x) <= 0.8 * np.abs(x).max()
    lo, hi = clipped_range(x, 0.8)
    inside &= (x >= lo) & (x <= hi)
    assert np.all(np.abs(recon[inside] - x[inside]) <= g.scale / 2 + 1e-6)


def test_nan_rejected():
    with pytest.raises(NumericError):
        quantize_group([1.0, np.nan], QuantParams(2))
    with pytest.raises(NumericError):
        quantize_rows(np.float32([[np.inf, 0]]), QuantParams(4))


def test_group_too_long():
    with pytest.raises(ParameterError):
        quantize_group(np.zeros(5), QuantParams(2, group_size=4))


def test_matches_scalar_oracle_on_random_groups():
    rng = np.random.default_rng(21)
    for bits in (2, 4):
        for clip in (0.8, 1.0):
            p = QuantParams(bits, clip)
            x = (rng.normal(size=(50, 128)) * rng.uniform(0.1, 10, (50, 1))).astype(np.float32)
            codes, scales, zeros = quantize_rows(x, p)
            for i in range(50):
                ref_codes, ref_scale, ref_zero = scalar_quantize(x[i], bits, clip)
                assert codes[i, 0].tolist() == ref_codes
                assert scales[i, 0] == np.float32(ref_scale)
                assert zeros[i, 0] == ref_zero


@settings(max_examples=150, deadline=None)
@given(st.sampled_from([2, 4]), st.sampled_from([0.5, 0.8, 1.0]),
       hnp.arrays(np.float32, st.integers(1, 40), elements=finite32))
def test_codes_are_nearest_levels(bits, clip, x):
    p = QuantParams(bits, clip, group_size=64)
    codes, scales, zeros = quantize_rows(x, p)
    scale, zero = float(scales[0]), int(zeros[0])
    lo, hi = clip * float(x.min()), clip * float(x.max())
    assume(hi - lo >= 1e-12)
    got = codes[0, : x.size]
    assert np.all(got <= p.qmax)
    np.testing.assert_array_equal(got, nearest_codes(x, scale, zero, bits))


@settings(max_examples=100, deadline=None)
@given(st.sampled_from([2, 4]), hnp.arrays(np.float32, 32, elements=finite32))
def test_monotone_codes(bits, x):
    codes, _, _ = quantize_rows(x, QuantParams(bits, 0.8, 32))
    order = np.argsort(x, kind="stable")
    assert np.all(np.diff(codes[0][order].astype(int)) >= 0)


@settings(max_examples=100, deadline=None)
@given(st.sampled_from([2, 4]), st.sampled_from([0.8, 1.0]),
       hnp.arrays(np.float32, st.integers(1, 64), elements=st.floats(-100, 100, width=32)))
def test_in_clip_error_bound(bits, clip, x):
    p = QuantParams(bits, clip, 64)
    codes, scales, zeros = quantize_rows(x, p)
    recon = dequantize_rows(codes, scales, zeros, x.size)
    lo, hi = clip * np.float64(x.min()), clip * np.float64(x.max())
    inside = (x >= lo) & (x <= hi)
    if hi - lo < 1e-12:
        np.testing.assert_array_equal(recon, np.float32((x.min() + x.max()) / 2) * np.ones_like(x))
    else:
        assert np.all(np.abs(recon[inside] - x[inside]) <= scales[0] / 2 + 1e-6 * max(1, np.abs(x).max()))


@given(st.floats(-1e3, 1e3, width=32), st.integers(1, 200), st.sampled_from([2, 4]))
def test_constant_rows_reconstruct_exactly(c, n, bits):
    x = np.full(n, c, np.float32)
    np.testing.assert_array_equal(fake_quantize(x, QuantParams(bits, 0.8, 64)), x)


# ------------------------------------------------------------------ rows


def test_row_padding():
    p = QuantParams(2, 1.0, group_size=4)
    row = quantize_row(np.float32([1, 2, 3, 4, 5, 6]), p)
    assert row.original_len == 6
    assert len(row.groups) == 2
    assert row.groups[1].length == 2
    last = row.groups[1]
    # padding stores the code of value 0, clamped into range
    pad = last.unpacked()[2:]
    assert np.all(pad == min(max(last.zero, 0), p.qmax))
    np.testing.assert_allclose(dequantize_row(row), [1, 2, 3, 4, 5, 6], atol=0.5)


def test_row_matches_vectorized_path():
    rng = np.random.default_rng(0)
    x = rng.normal(size=200).astype(np.float32)
    p = QuantParams(4, 1.0)
    np.testing.assert_array_equal(dequantize_row(quantize_row(x, p)), fake_quantize(x, p))


def test_padding_does_not_change_stats():
    p = QuantParams(2, 1.0, group_size=8)
    x = np.float32([3, 4, 5])
    codes, scales, zeros = quantize_rows(x, p)
    # zero padding would have pulled the minimum down to 0
    assert scales[0] == pytest.approx(2 / 3)
    assert np.all(np.abs(fake_quantize(x, p) - x) <= scales[0] / 2 + 1e-6)


def test_effective_bits():
    assert effective_bits(2, 128, 128) == 2.5
    assert effective_bits(4, 128, 128) == 4.5
    assert effective_bits(2, 130, 128) == pytest.approx(2 + 128 / 130)
