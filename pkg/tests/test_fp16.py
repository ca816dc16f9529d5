import numpy as np
import pytest
from hypothesis import given, strategies as st

from yasgd.fp16 import HALF_MAX, dequantize_fp16, quantize_fp16, round_trip


def half_table() -> np.ndarray:
    """Value of every non-negative finite half bit pattern 0x0000..0x7BFF, from the format definition."""
    bits = np.arange(0x7C00)
    exp, mant = bits >> 10, bits & 0x3FF
    sub = mant / 1024.0 * 2.0**-14
    normal = (1 + mant / 1024.0) * 2.0 ** (exp.astype(float) - 15)
    return np.where(exp == 0, sub, normal)


TABLE = half_table()


def oracle_bits(x: np.ndarray) -> np.ndarray:
    """Round-to-nearest-even into half with saturation, by searching the table."""
    x = x.astype(np.float64)
    ax = np.abs(x)
    hi = np.clip(np.searchsorted(TABLE, ax), 0, len(TABLE) - 1)
    lo = np.clip(hi - 1, 0, None)
    dlo, dhi = ax - TABLE[lo], TABLE[hi] - ax
    pick = np.where(dlo < dhi, lo, np.where(dhi < dlo, hi, np.where(lo % 2 == 0, lo, hi)))
    pick = np.where(ax >= TABLE[-1], len(TABLE) - 1, pick)
    return (pick | np.where(np.signbit(x), 0x8000, 0)).astype(np.uint16)


def test_table_matches_format_landmarks():
    assert TABLE[0x3C00] == 1.0
    assert TABLE[-1] == HALF_MAX
    assert TABLE[1] == 2.0**-24


def test_exact_values():
    assert dequantize_fp16(quantize_fp16(np.float32(1.0))) == 1.0
    assert quantize_fp16(np.array([1e6, -1e6, np.inf], np.float32)).tolist() == [HALF_MAX, -HALF_MAX, HALF_MAX]
    assert np.isnan(quantize_fp16(np.array([np.nan], np.float32))[0])


def test_subnormal_example():
    x = np.array([2.0**-24 * 1.5], np.float32)  # halfway between 1 and 2 ulps of the smallest subnormal
    assert quantize_fp16(x).view(np.uint16)[0] == oracle_bits(x)[0] == 2


def test_all_finite_halves_round_trip():
    bits = np.arange(1 << 16, dtype=np.uint32).astype(np.uint16)
    halves = bits.view(np.float16)
    finite = halves[np.isfinite(halves)]
    assert finite.size == 63488
    again = quantize_fp16(finite.astype(np.float32))
    assert np.array_equal(again.view(np.uint16), finite.view(np.uint16))


def test_quantize_matches_oracle_on_midpoints_and_neighbours():
    pos = TABLE.astype(np.float32)
    mids = ((TABLE[:-1] + TABLE[1:]) / 2).astype(np.float32)  # exact in float32
    up = np.nextafter(mids, np.float32(np.inf))
    down = np.nextafter(mids, np.float32(0))
    beyond = np.array([65504, 65519.99, 65520, 65536, 3e38], np.float32)
    xs = np.concatenate([pos, mids, up, down, beyond])
    xs = np.concatenate([xs, -xs])
    assert np.array_equal(quantize_fp16(xs).view(np.uint16), oracle_bits(xs))


def test_quantize_matches_oracle_on_random_bit_patterns():
    words = np.random.default_rng(0).integers(0, 2**32, size=200_000, dtype=np.uint64).astype(np.uint32)
    xs = words.view(np.float32)
    xs = xs[np.isfinite(xs)]
    assert np.array_equal(quantize_fp16(xs).view(np.uint16), oracle_bits(xs))


@given(st.floats(2.0**-14, HALF_MAX, width=32))
def test_error_within_half_ulp_in_normal_range(x):
    exp = np.floor(np.log2(x))
    ulp = 2.0 ** (exp - 10)
    assert abs(float(round_trip(np.float32(x))) - x) <= ulp / 2
