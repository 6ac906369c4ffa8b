import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from depthnet.core import (
    DimensionError,
    QFormat,
    Tensor,
    dequantize,
    quantize,
    round_half_away,
    shift_round,
)


def scalar_quantize(x: float, q: QFormat) -> int:
    """Rounding oracle in exact rational arithmetic."""
    scaled = Fraction(x) * 2 ** q.frac_bits
    mag = math.floor(abs(scaled) + Fraction(1, 2))
    raw = mag if scaled >= 0 else -mag
    return max(q.raw_min, min(q.raw_max, raw))


def q1(x, q=QFormat(16, 8)) -> int:
    return int(quantize(Tensor(np.array([[[x]]])), q).data[0, 0, 0])


def test_qformat_range():
    q = QFormat(16, 8)
    assert q.min_value == -128.0
    assert q.max_value == 128.0 - 2 ** -8
    assert QFormat.parse("32:16") == QFormat(32, 16)


@pytest.mark.parametrize("total,frac", [(7, 2), (33, 8), (16, 16), (16, -1)])
def test_qformat_rejects_bad_widths(total, frac):
    with pytest.raises(ValueError):
        QFormat(total, frac)


def test_quantize_exact_value():
    assert q1(0.5) == 128


def test_quantize_saturates():
    assert q1(1000.0, QFormat(8, 4)) == 127
    assert q1(-1000.0, QFormat(8, 4)) == -128


def test_quantize_small_value_matches_rounding_oracle():
    raw = q1(0.00195)
    assert raw == scalar_quantize(0.00195, QFormat(16, 8))
    # 0.00195 * 256 = 0.4992, which rounds to 0; 1 lsb needs at least 2^-9
    assert raw == 0
    assert q1(2 ** -9) == 1
    assert dequantize(quantize(Tensor(np.full((1, 1, 1), 2 ** -9)))).data[0, 0, 0] == 0.00390625


def test_quantize_ties_away_from_zero():
    assert q1(2.5 / 256) == 3
    assert q1(-2.5 / 256) == -3
    assert list(round_half_away([0.5, 1.5, -0.5, -1.5])) == [1, 2, -1, -2]


def test_dequantize_examples():
    q = QFormat(16, 8)
    t = Tensor(np.array([[[128, -256]]]), q)
    assert dequantize(t).data.tolist() == [[[0.5, -1.0]]]


def test_quantize_rejects_non_finite():
    with pytest.raises(ValueError):
        quantize(Tensor(np.array([[[np.nan]]])))


@given(st.floats(-200, 200, allow_nan=False), st.sampled_from([(8, 4), (16, 8), (16, 12), (32, 16)]))
def test_quantize_matches_oracle(x, fmt):
    q = QFormat(*fmt)
    assert q1(x, q) == scalar_quantize(x, q)


@given(st.floats(-1e6, 1e6, allow_nan=False), st.floats(-1e6, 1e6, allow_nan=False))
def test_quantize_monotonic(a, b):
    lo, hi = sorted((a, b))
    assert q1(lo) <= q1(hi)


@given(st.floats(allow_nan=False, allow_infinity=False), st.integers(8, 32), st.data())
def test_quantize_never_leaves_range(x, total, data):
    q = QFormat(total, data.draw(st.integers(0, total - 1)))
    assert q.raw_min <= q1(x, q) <= q.raw_max


@given(st.floats(-127.99, 127.99, allow_nan=False))
def test_round_trip_error_bound(x):
    t = Tensor(np.array([[[x]]]))
    assert abs(dequantize(quantize(t)).data[0, 0, 0] - x) <= 2 ** -9


@given(st.integers(-(2 ** 40), 2 ** 40), st.integers(1, 20))
def test_shift_round_oracle(raw, shift):
    exact = Fraction(raw, 2 ** shift)
    mag = math.floor(abs(exact) + Fraction(1, 2))
    assert int(shift_round(raw, shift)) == (mag if exact >= 0 else -mag)


def test_row_major_indexing_is_bijective(rng):
    t = Tensor.zeros(3, 5, 4)
    seen = set()
    for y in range(3):
        for x in range(5):
            for c in range(4):
                i = t.index(y, x, c)
                assert i == (y * 5 + x) * 4 + c
                seen.add(i)
                t[y, x, c] = i
    assert seen == set(range(60))
    assert np.array_equal(t.elements, np.arange(60))
    assert t[2, 4, 3] == 59


def test_tensor_validation():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((0, 3, 1)))
    with pytest.raises(DimensionError):
        Tensor(np.zeros(5))
    with pytest.raises(TypeError):
        Tensor(np.zeros((2, 2, 1)), QFormat())
    with pytest.raises(IndexError):
        Tensor.zeros(2, 2, 1)[2, 0, 0]
    assert Tensor(np.zeros((2, 3))).shape == (2, 3, 1)
