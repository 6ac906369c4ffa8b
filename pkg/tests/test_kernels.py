import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from depthnet.core import QFormat, Tensor, quantize
from depthnet.kernels import (
    ConvKernel,
    DWKernel,
    MulCounter,
    PWKernel,
    TileConfig,
    add,
    conv3x3,
    deconv3x3,
    dw_conv3x3,
    dw_deconv3x3_fast,
    dw_deconv3x3_naive,
    leaky_relu,
    pw_conv,
    rotate180,
    tiled_execute,
)

Q = QFormat(16, 8)


def rand_tensor(rng, h, w, c, lo=-4.0, hi=4.0, fixed=False):
    t = Tensor(rng.uniform(lo, hi, (h, w, c)))
    return quantize(t, Q) if fixed else t


def rand_dw(rng, c, bias=True):
    return DWKernel(rng.uniform(-1, 1, (c, 3, 3)), rng.uniform(-1, 1, c) if bias else None)


def dw_oracle(x, taps, bias, stride):
    """Direct nested loops, zero outside the image."""
    h, w, c = x.shape
    oh, ow = -(-h // stride), -(-w // stride)
    out = np.zeros((oh, ow, c))
    for y in range(oh):
        for xx in range(ow):
            for ch in range(c):
                s = 0.0
                for ky in range(3):
                    for kx in range(3):
                        iy, ix = y * stride + ky - 1, xx * stride + kx - 1
                        if 0 <= iy < h and 0 <= ix < w:
                            s += x[iy, ix, ch] * taps[ch, ky, kx]
                out[y, xx, ch] = s + bias[ch]
    return out


def transposed_conv_oracle(x, taps):
    """Scatter form of a stride-2 transposed conv, cropped to 2H x 2W."""
    h, w, c = x.shape
    out = np.zeros((2 * h + 1, 2 * w + 1, c))
    for i in range(h):
        for j in range(w):
            for ky in range(3):
                for kx in range(3):
                    out[2 * i + ky, 2 * j + kx] += x[i, j] * taps[:, ky, kx]
    return out[:2 * h, :2 * w]


# ----------------------------------------------------------- depthwise conv


def test_dw_zero_input_gives_bias():
    k = DWKernel(np.arange(9.0).reshape(1, 3, 3), np.array([1.5]))
    out = dw_conv3x3(Tensor.zeros(4, 4, 1), k)
    assert np.all(out.data == 1.5)


def test_dw_identity_kernel():
    taps = np.zeros((3, 3, 3))
    taps[:, 1, 1] = 1
    x = rand_tensor(np.random.default_rng(0), 5, 7, 3)
    assert dw_conv3x3(x, DWKernel(taps)) == x


@pytest.mark.parametrize("stride", [1, 2])
def test_dw_matches_loop_oracle(rng, stride):
    x = rand_tensor(rng, 8, 8, 3)
    k = rand_dw(rng, 3)
    out = dw_conv3x3(x, k, stride)
    assert out.shape == (8 // stride, 8 // stride, 3)
    np.testing.assert_allclose(out.data, dw_oracle(x.data, k.taps, k.bias, stride), rtol=1e-12, atol=1e-12)


@given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 4), st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_dw_stride2_is_subsampled_stride1(h, w, c, seed):
    rng = np.random.default_rng(seed)
    x = rand_tensor(rng, h, w, c)
    k = rand_dw(rng, c)
    assert np.array_equal(dw_conv3x3(x, k, 2).data, dw_conv3x3(x, k, 1).data[::2, ::2])


def test_dw_rejects_channel_mismatch(rng):
    with pytest.raises(ValueError):
        dw_conv3x3(rand_tensor(rng, 4, 4, 2), rand_dw(rng, 3))
    with pytest.raises(ValueError):
        dw_conv3x3(rand_tensor(rng, 4, 4, 3), rand_dw(rng, 3), stride=3)


# ----------------------------------------------------------- pointwise conv


def test_pw_identity():
    x = rand_tensor(np.random.default_rng(1), 3, 4, 5)
    assert pw_conv(x, PWKernel(np.eye(5))) == x


def test_pw_scalar_example():
    x = Tensor(np.array([[[3.0, 5.0]]]))
    out = pw_conv(x, PWKernel(np.array([[2.0, -1.0]]), np.array([1.0])))
    assert out.data.tolist() == [[[2.0]]]


def test_pw_stride2_samples_even_coordinates(rng):
    x = rand_tensor(rng, 4, 4, 3)
    k = PWKernel(rng.uniform(-1, 1, (5, 3)), rng.uniform(-1, 1, 5))
    out = pw_conv(x, k, stride=2)
    assert out.shape == (2, 2, 5)
    expected = np.einsum("yxc,oc->yxo", x.data[::2, ::2], k.taps) + k.bias
    np.testing.assert_allclose(out.data, expected, rtol=1e-12)


def pw_fixed_oracle(raw, taps_raw, bias_raw, accum: QFormat, q: QFormat):
    """Sequential accumulation over input channels with saturation after every add."""
    h, w, ci = raw.shape
    co = taps_raw.shape[0]
    out = np.zeros((h, w, co), dtype=np.int64)
    shift_bias = accum.frac_bits - q.frac_bits
    shift_prod = 2 * q.frac_bits - accum.frac_bits

    def rescale(v, shift):
        if shift <= 0:
            return v << -shift
        mag = (abs(v) + (1 << (shift - 1))) >> shift
        return mag if v >= 0 else -mag

    def sat(v, fmt):
        return max(fmt.raw_min, min(fmt.raw_max, v))

    for y in range(h):
        for x in range(w):
            for o in range(co):
                acc = sat(rescale(int(bias_raw[o]), -shift_bias), accum)
                for i in range(ci):
                    acc = sat(acc + rescale(int(raw[y, x, i]) * int(taps_raw[o, i]), shift_prod), accum)
                out[y, x, o] = sat(rescale(acc, accum.frac_bits - q.frac_bits), q)
    return out


@pytest.mark.parametrize("accum", [QFormat(32, 16), QFormat(16, 8), QFormat(24, 12)])
def test_pw_fixed_matches_sequential_oracle(rng, accum):
    x = rand_tensor(rng, 3, 4, 6, -60, 60, fixed=True)
    k = PWKernel(rng.uniform(-4, 4, (5, 6)), rng.uniform(-2, 2, 5))
    out = pw_conv(x, k, accum=accum)
    taps_raw = quantize(Tensor(k.taps[None]), Q).data[0]
    bias_raw = quantize(Tensor(k.bias[None, None]), Q).data[0, 0]
    assert np.array_equal(out.data, pw_fixed_oracle(x.data, taps_raw, bias_raw, accum, Q))


# --------------------------------------------------------- deconvolution


def test_deconv_hand_evaluated_patch():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    k = DWKernel(np.arange(1.0, 10.0).reshape(1, 3, 3))
    out = dw_deconv3x3_fast(x, k).data[:, :, 0]
    # window a=1, b=2, c=3, d=4 lands on output patch (2, 2)
    assert out[2, 2] == 1 * 1 + 2 * 3 + 3 * 7 + 4 * 9 == 64
    assert out[2, 3] == 2 * 2 + 4 * 8
    assert out[3, 2] == 3 * 4 + 4 * 6
    assert out[3, 3] == 4 * 5
    assert dw_deconv3x3_naive(x, k) == dw_deconv3x3_fast(x, k)


def test_deconv_single_pixel_all_ones():
    v = 3.25
    k = DWKernel(np.ones((1, 3, 3)))
    for fn in (dw_deconv3x3_fast, dw_deconv3x3_naive):
        assert fn(Tensor(np.full((1, 1, 1), v)), k).data[:, :, 0].tolist() == [[v, v], [v, v]]


def test_deconv_zero_taps_give_bias(rng):
    k = DWKernel(np.zeros((2, 3, 3)), np.array([0.5, -1.0]))
    out = dw_deconv3x3_naive(rand_tensor(rng, 3, 5, 2), k)
    assert out.shape == (6, 10, 2)
    assert np.all(out.data[..., 0] == 0.5) and np.all(out.data[..., 1] == -1.0)


def test_deconv_zero_input(rng):
    out = dw_deconv3x3_fast(Tensor.zeros(4, 4, 2), rand_dw(rng, 2, bias=False))
    assert not out.data.any()


def test_deconv_random_4x4x2_fast_equals_naive(rng):
    x = rand_tensor(rng, 4, 4, 2)
    k = rand_dw(rng, 2)
    assert dw_deconv3x3_fast(x, k) == dw_deconv3x3_naive(x, k)


@given(st.integers(1, 20), st.integers(1, 20), st.integers(1, 5), st.booleans(), st.integers(0, 2**31))
@settings(max_examples=60, deadline=None)
def test_deconv_fast_equals_naive(h, w, c, fixed, seed):
    rng = np.random.default_rng(seed)
    x = rand_tensor(rng, h, w, c, fixed=fixed)
    k = rand_dw(rng, c)
    assert np.array_equal(dw_deconv3x3_fast(x, k).data, dw_deconv3x3_naive(x, k).data)


def test_deconv_is_transposed_convolution(rng):
    x = rand_tensor(rng, 5, 6, 3)
    taps = rng.uniform(-1, 1, (3, 3, 3))
    out = dw_deconv3x3_fast(x, DWKernel(taps), rotate=True)
    np.testing.assert_allclose(out.data, transposed_conv_oracle(x.data, taps), atol=1e-12)


def test_deconv_multiply_counts(rng):
    h, w = 6, 7
    x = rand_tensor(rng, h, w, 1)
    k = rand_dw(rng, 1)
    fast, naive = MulCounter(), MulCounter()
    dw_deconv3x3_fast(x, k, counter=fast)
    dw_deconv3x3_naive(x, k, counter=naive)
    patches = h * w
    assert fast.count == 9 * patches
    assert naive.count == 36 * patches


# ---------------------------------------------------------- linearity


@pytest.mark.parametrize("op", ["dw", "dw2", "pw", "deconv_fast", "deconv_naive", "conv", "deconv"])
def test_ops_are_linear(rng, op):
    a, b = rand_tensor(rng, 6, 5, 4), rand_tensor(rng, 6, 5, 4)
    alpha, beta = 1.7, -0.3
    dw = rand_dw(rng, 4, bias=False)
    pw = PWKernel(rng.uniform(-1, 1, (3, 4)))
    dense = ConvKernel(rng.uniform(-1, 1, (3, 4, 3, 3)))
    fn = {
        "dw": lambda t: dw_conv3x3(t, dw),
        "dw2": lambda t: dw_conv3x3(t, dw, 2),
        "pw": lambda t: pw_conv(t, pw),
        "deconv_fast": lambda t: dw_deconv3x3_fast(t, dw),
        "deconv_naive": lambda t: dw_deconv3x3_naive(t, dw),
        "conv": lambda t: conv3x3(t, dense),
        "deconv": lambda t: deconv3x3(t, dense),
    }[op]
    lhs = fn(Tensor(alpha * a.data + beta * b.data)).data
    rhs = alpha * fn(a).data + beta * fn(b).data
    np.testing.assert_allclose(lhs, rhs, rtol=1e-6, atol=1e-9)


# ------------------------------------------------------- dense 3x3 ops


def test_dense_conv_matches_sum_of_depthwise(rng):
    x = rand_tensor(rng, 7, 9, 3)
    taps = rng.uniform(-1, 1, (4, 3, 3, 3))
    bias = rng.uniform(-1, 1, 4)
    for stride in (1, 2):
        out = conv3x3(x, ConvKernel(taps, bias), stride)
        for o in range(4):
            ref = dw_oracle(x.data, taps[o], np.zeros(3), stride).sum(axis=2) + bias[o]
            np.testing.assert_allclose(out.data[..., o], ref, rtol=1e-10, atol=1e-12)


def test_dense_deconv_matches_sum_of_depthwise(rng):
    x = rand_tensor(rng, 4, 5, 3)
    taps = rng.uniform(-1, 1, (2, 3, 3, 3))
    out = deconv3x3(x, ConvKernel(taps, np.array([0.25, -0.5])))
    for o in range(2):
        ref = dw_deconv3x3_naive(x, DWKernel(taps[o])).data.sum(axis=2) + [0.25, -0.5][o]
        np.testing.assert_allclose(out.data[..., o], ref, rtol=1e-10, atol=1e-12)


def test_dense_fixed_matches_real_reference(rng):
    x = rand_tensor(rng, 6, 6, 4, -2, 2, fixed=True)
    k = ConvKernel(rng.uniform(-1, 1, (3, 4, 3, 3)), rng.uniform(-1, 1, 3))
    out = conv3x3(x, k)
    kq = ConvKernel(quantize(Tensor(k.taps.reshape(3, 4, 9)), Q).to_real().reshape(3, 4, 3, 3),
                    quantize(Tensor(k.bias[None, None]), Q).to_real()[0, 0])
    ref = conv3x3(Tensor(x.to_real()), kq)
    # exact sums of quantized values, a single rounding at the end
    assert np.max(np.abs(out.to_real() - ref.data)) <= Q.lsb / 2 + 1e-12


# ---------------------------------------------------------- activation


def test_leaky_relu_examples():
    out = leaky_relu(Tensor(np.array([[[2.0, -1.0, 0.0]]]))).data.ravel()
    assert out.tolist() == [2.0, -0.2, 0.0]


@given(st.integers(-(2**15), 2**15 - 1))
def test_leaky_relu_fixed_rounds_exactly(raw):
    out = int(leaky_relu(Tensor(np.array([[[raw]]]), Q)).data[0, 0, 0])
    if raw >= 0:
        assert out == raw
    else:
        exact = -raw / 5
        assert out == -int(np.floor(exact + 0.5))


def test_add_saturates_in_fixed_point():
    a = Tensor(np.array([[[Q.raw_max]]]), Q)
    assert add(a, a).data[0, 0, 0] == Q.raw_max
    with pytest.raises(TypeError):
        add(a, Tensor(np.array([[[1]]]), QFormat(16, 4)))


def test_rotate180():
    t = np.arange(9).reshape(1, 3, 3)
    assert rotate180(t)[0].tolist() == [[8, 7, 6], [5, 4, 3], [2, 1, 0]]


# --------------------------------------------------------------- tiling


def test_tile_config_validation():
    with pytest.raises(ValueError):
        TileConfig(0)
    with pytest.raises(ValueError):
        TileConfig(4, 2, 10)


def test_single_tile_equals_direct(rng):
    x = rand_tensor(rng, 10, 12, 8)
    k = rand_dw(rng, 8)
    assert tiled_execute(x, dw_conv3x3, k, TileConfig(8, 64, 64)) == dw_conv3x3(x, k)


def test_dw_16_channels_partition_4(rng):
    x = rand_tensor(rng, 20, 30, 16)
    k = rand_dw(rng, 16)
    for stride in (1, 2):
        assert tiled_execute(x, dw_conv3x3, k, TileConfig(4, 8, 8), stride=stride) == dw_conv3x3(x, k, stride)


@pytest.mark.parametrize("fixed", [False, True])
def test_pw_64_in_channels_partition_32(rng, fixed):
    x = rand_tensor(rng, 9, 13, 64, -8, 8, fixed=fixed)
    k = PWKernel(rng.uniform(-1, 1, (32, 64)), rng.uniform(-1, 1, 32))
    assert tiled_execute(x, pw_conv, k, TileConfig(32, 4, 5)) == pw_conv(x, k)
    narrow = x.qformat if fixed else None
    assert tiled_execute(x, pw_conv, k, TileConfig(32, 4, 5), accum=narrow) == pw_conv(x, k, accum=narrow)


@given(st.integers(1, 18), st.integers(1, 18), st.integers(1, 40), st.sampled_from([1, 2, 4, 8, 32]),
       st.integers(3, 9), st.integers(3, 9), st.booleans(), st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_tiled_equals_untiled(h, w, c, part, bh, bw, fixed, seed):
    rng = np.random.default_rng(seed)
    x = rand_tensor(rng, h, w, c, fixed=fixed)
    cfg = TileConfig(part, bh, bw)
    dk = rand_dw(rng, c)
    pk = PWKernel(rng.uniform(-1, 1, (3, c)), rng.uniform(-1, 1, 3))
    assert tiled_execute(x, dw_conv3x3, dk, cfg, stride=2) == dw_conv3x3(x, dk, 2)
    assert tiled_execute(x, dw_deconv3x3_fast, dk, cfg) == dw_deconv3x3_fast(x, dk)
    assert tiled_execute(x, dw_deconv3x3_naive, dk, cfg) == dw_deconv3x3_naive(x, dk)
    assert tiled_execute(x, pw_conv, pk, cfg, stride=2) == pw_conv(x, pk, 2)


def test_tiled_parallel_is_deterministic(rng, monkeypatch):
    monkeypatch.setenv("DEPTHNET_THREADS", "4")
    x = rand_tensor(rng, 16, 16, 12, fixed=True)
    k = rand_dw(rng, 12)
    assert tiled_execute(x, dw_conv3x3, k, TileConfig(4, 4, 4)) == dw_conv3x3(x, k)


# ------------------------------------------- external reference (optional)


def test_against_torch_reference(rng):
    torch = pytest.importorskip("torch")
    F = torch.nn.functional
    x = rand_tensor(rng, 9, 11, 4)
    taps = rng.uniform(-1, 1, (4, 3, 3))
    bias = rng.uniform(-1, 1, 4)
    xt = torch.from_numpy(x.data.transpose(2, 0, 1)[None].copy())
    wt = torch.from_numpy(taps[:, None].copy())
    bt = torch.from_numpy(bias)
    for stride in (1, 2):
        ref = F.conv2d(xt, wt, bt, stride=stride, padding=1, groups=4)[0].numpy().transpose(1, 2, 0)
        np.testing.assert_allclose(dw_conv3x3(x, DWKernel(taps, bias), stride).data, ref, atol=1e-12)
    ref = F.conv_transpose2d(xt, wt, bt, stride=2, groups=4)[0].numpy().transpose(1, 2, 0)[:18, :22]
    out = dw_deconv3x3_fast(x, DWKernel(taps, bias), rotate=True)
    np.testing.assert_allclose(out.data, ref, atol=1e-12)
