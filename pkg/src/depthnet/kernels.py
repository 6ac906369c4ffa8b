"""Compute primitives of the processing engine.

Depthwise 3x3 convolution (stride 1 or 2), pointwise 1x1 convolution, and
depthwise 3x3 x2 deconvolution in two forms: the naive zero-interleave then
convolve route, and the zero-skipping 2x2-window route that only multiplies
real input samples. Standard (dense) 3x3 convolution and deconvolution are
provided for the non-separable network variant.

Every op works on real tensors and on fixed-point tensors. In fixed point,
taps and biases are quantized to the input's format, products are held at
double width, and each output element is re-quantized once. Pointwise
convolution routes its running sum through a separate accumulator format.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _accum
from .core import (
    ACCUM_FORMAT,
    DimensionError,
    QFormat,
    Tensor,
    quantize_array,
    requantize,
    saturate,
    shift_round,
)

LEAKY_SLOPE = 0.2


class MulCounter:
    """Counts scalar multiplications performed by the kernels."""

    def __init__(self):
        self.count = 0

    def add(self, n):
        self.count += int(n)

    def reset(self):
        self.count = 0


def _count(counter, n):
    if counter is not None:
        counter.add(n)


@dataclass
class DWKernel:
    taps: np.ndarray  # (C, 3, 3)
    bias: np.ndarray | None = None  # (C,)

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=np.float64)
        if self.taps.ndim == 1:
            self.taps = self.taps.reshape(-1, 3, 3)
        self.bias = np.zeros(self.taps.shape[0]) if self.bias is None else np.asarray(self.bias, dtype=np.float64)
        if self.taps.shape[1:] != (3, 3) or self.bias.shape != (self.taps.shape[0],):
            raise DimensionError(f"bad depthwise kernel shapes {self.taps.shape}, {self.bias.shape}")

    @property
    def channels(self):
        return self.taps.shape[0]

    def select(self, c0, c1):
        return DWKernel(self.taps[c0:c1], self.bias[c0:c1])


@dataclass
class PWKernel:
    taps: np.ndarray  # (Co, Ci)
    bias: np.ndarray | None = None  # (Co,)

    def __post_init__(self):
        self.taps = np.atleast_2d(np.asarray(self.taps, dtype=np.float64))
        self.bias = np.zeros(self.taps.shape[0]) if self.bias is None else np.asarray(self.bias, dtype=np.float64)
        if self.bias.shape != (self.taps.shape[0],):
            raise DimensionError(f"bad pointwise kernel shapes {self.taps.shape}, {self.bias.shape}")

    @property
    def out_channels(self):
        return self.taps.shape[0]

    @property
    def in_channels(self):
        return self.taps.shape[1]


@dataclass
class ConvKernel:
    """Dense 3x3 kernel, taps indexed (out, in, ky, kx)."""

    taps: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=np.float64)
        self.bias = np.zeros(self.taps.shape[0]) if self.bias is None else np.asarray(self.bias, dtype=np.float64)
        if self.taps.ndim != 4 or self.taps.shape[2:] != (3, 3) or self.bias.shape != (self.taps.shape[0],):
            raise DimensionError(f"bad conv kernel shapes {self.taps.shape}, {self.bias.shape}")

    @property
    def out_channels(self):
        return self.taps.shape[0]

    @property
    def in_channels(self):
        return self.taps.shape[1]


@dataclass
class TileConfig:
    channel_partition: int = 32
    buffer_height: int = 32
    buffer_width: int = 152

    def __post_init__(self):
        if self.channel_partition < 1:
            raise ValueError("channel_partition must be >= 1")
        if self.buffer_height < 3 or self.buffer_width < 3:
            raise ValueError("buffer must hold at least one 3x3 footprint")


def rotate180(taps):
    """Flip the trailing 3x3 of a tap array, as framework-trained deconv weights need."""
    return np.ascontiguousarray(np.asarray(taps)[..., ::-1, ::-1])


def threads() -> int:
    try:
        return max(1, int(os.environ.get("DEPTHNET_THREADS", "1")))
    except ValueError:
        return 1


def _check_channels(x: Tensor, expected: int):
    if x.channels != expected:
        raise DimensionError(f"input has {x.channels} channels, kernel expects {expected}")


def _check_stride(stride):
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")


def _params(x: Tensor, taps, bias):
    """Taps and bias in the arithmetic domain of ``x``.

    Fixed point: taps in the feature format, bias pre-shifted to the 2f
    fractional bits of the products.
    """
    if not x.is_fixed:
        return taps, bias
    q = x.qformat
    return quantize_array(taps, q), quantize_array(bias, q) << q.frac_bits


def _finish(x: Tensor, acc):
    if x.is_fixed:
        return requantize(acc, 2 * x.qformat.frac_bits, x.qformat)
    return acc


def _out_len(n, stride):
    return -(-n // stride)


# --------------------------------------------------------------- depthwise conv


def _dw_window_sum(src, taps, stride, y0, y1, x0, x1, counter):
    """Sum over taps in (ky, kx) order for output rows [y0,y1), cols [x0,x1).

    ``src`` is the zero-padded input, so output (y, x) reads
    src[y*s + ky, x*s + kx].
    """
    flat_taps = np.ascontiguousarray(np.asarray(taps).reshape(taps.shape[0], 9).T, dtype=src.dtype)
    _count(counter, 9 * (y1 - y0) * (x1 - x0) * src.shape[2])
    return _accum.dw_window_sum(np.ascontiguousarray(src), flat_taps, stride, y0, y1, x0, x1)


def _pad_same(data):
    return np.pad(data, ((1, 1), (1, 1), (0, 0)))


def _pad_top_left(data):
    return np.pad(data, ((1, 0), (1, 0), (0, 0)))


def _dw_conv_block(x, src, taps, bias, stride, y0, y1, x0, x1, counter=None):
    acc = _dw_window_sum(src, taps, stride, y0, y1, x0, x1, counter)
    return _finish(x, acc + bias)


def dw_conv3x3(x: Tensor, k: DWKernel, stride: int = 1, counter: MulCounter | None = None) -> Tensor:
    """Per-channel 3x3 correlation with one pixel of zero padding."""
    _check_channels(x, k.channels)
    _check_stride(stride)
    taps, bias = _params(x, k.taps, k.bias)
    oh, ow = _out_len(x.height, stride), _out_len(x.width, stride)
    return x.like(_dw_conv_block(x, _pad_same(x.data), taps, bias, stride, 0, oh, 0, ow, counter))


# ------------------------------------------------------------- pointwise conv


def _pw_init(x: Tensor, k: PWKernel, npix, accum: QFormat | None):
    """Accumulator seeded with the bias, plus the accumulator format used."""
    if not x.is_fixed:
        return np.repeat(k.bias[None, :], npix, axis=0), None
    accum = accum or ACCUM_FORMAT
    bias = quantize_array(k.bias, x.qformat)
    bias = saturate(shift_round(bias, x.qformat.frac_bits - accum.frac_bits), accum)
    return np.repeat(bias[None, :], npix, axis=0).astype(np.int64), accum


def _pw_accumulate(x: Tensor, xs, taps, acc, accum, counter):
    """Add input channels of ``xs`` (N x ci) against ``taps`` (Co x ci) into ``acc``."""
    xs = np.ascontiguousarray(xs)
    taps = np.ascontiguousarray(taps.T)
    if x.is_fixed:
        shift = 2 * x.qformat.frac_bits - accum.frac_bits
        _accum.pw_accumulate_fixed(xs, taps, acc, shift, accum.raw_min, accum.raw_max)
    else:
        _accum.pw_accumulate_real(xs, taps, acc)
    _count(counter, xs.shape[0] * taps.shape[0] * taps.shape[1])


def _pw_finish(x: Tensor, acc, accum):
    if x.is_fixed:
        return requantize(acc, accum.frac_bits, x.qformat)
    return acc


def pw_conv(
    x: Tensor,
    k: PWKernel,
    stride: int = 1,
    accum: QFormat | None = None,
    counter: MulCounter | None = None,
) -> Tensor:
    """1x1 convolution; stride 2 samples even coordinates.

    In fixed point the running sum lives in ``accum`` (default Q(32,16)) with
    saturation after every addition, then is re-quantized to the input
    format. Passing ``accum=x.qformat`` reproduces a single-precision datapath.
    """
    _check_channels(x, k.in_channels)
    _check_stride(stride)
    xs = x.data[::stride, ::stride]
    oh, ow = xs.shape[:2]
    taps = quantize_array(k.taps, x.qformat) if x.is_fixed else k.taps
    acc, accum = _pw_init(x, k, oh * ow, accum)
    _pw_accumulate(x, xs.reshape(oh * ow, -1), taps, acc, accum, counter)
    return x.like(_pw_finish(x, acc, accum).reshape(oh, ow, k.out_channels))


# ------------------------------------------------------- depthwise deconvolution


def _interleave(data):
    """Zero-interleaved grid for the naive deconvolution.

    Input (p, q) lands at (2p+2, 2q+2) of a (2H+2) x (2W+2) grid, so a 3x3
    sliding product over it yields exactly 2H x 2W outputs aligned with the
    2x2-window equations.
    """
    h, w, c = data.shape
    z = np.zeros((2 * h + 2, 2 * w + 2, c), dtype=data.dtype)
    z[2::2, 2::2] = data
    return z


def _deconv_naive_block(x, src, taps, bias, y0, y1, x0, x1, counter=None):
    acc = _dw_window_sum(src, taps, 1, y0, y1, x0, x1, counter)
    return _finish(x, acc + bias)


def dw_deconv3x3_naive(x: Tensor, k: DWKernel, rotate: bool = False, counter: MulCounter | None = None) -> Tensor:
    """x2 depthwise deconvolution by interleaving zeros and convolving.

    Wasteful by design: 36 multiplies per 2x2 output patch, most against
    structural zeros. Kept as the reference for the fast path.
    """
    _check_channels(x, k.channels)
    taps, bias = _params(x, rotate180(k.taps) if rotate else k.taps, k.bias)
    out = _deconv_naive_block(x, _interleave(x.data), taps, bias, 0, 2 * x.height, 0, 2 * x.width, counter)
    return x.like(out)


def _deconv_fast_block(x, src, taps, bias, y0, y1, x0, x1, counter=None):
    """Output patches for windows [y0,y1) x [x0,x1) of the top/left padded map."""
    a = src[y0:y1, x0:x1]
    b = src[y0:y1, x0 + 1:x1 + 1]
    c = src[y0 + 1:y1 + 1, x0:x1]
    d = src[y0 + 1:y1 + 1, x0 + 1:x1 + 1]
    t = taps
    zero = np.zeros(a.shape, dtype=src.dtype)
    # left-to-right term order matches the naive route's kernel-index order
    p11 = zero + a * t[:, 0, 0] + b * t[:, 0, 2] + c * t[:, 2, 0] + d * t[:, 2, 2]
    p12 = zero + b * t[:, 0, 1] + d * t[:, 2, 1]
    p21 = zero + c * t[:, 1, 0] + d * t[:, 1, 2]
    p22 = zero + d * t[:, 1, 1]
    _count(counter, 9 * a.size)
    out = np.empty((2 * (y1 - y0), 2 * (x1 - x0), src.shape[2]), dtype=src.dtype)
    out[0::2, 0::2] = p11
    out[0::2, 1::2] = p12
    out[1::2, 0::2] = p21
    out[1::2, 1::2] = p22
    return _finish(x, out + bias)


def dw_deconv3x3_fast(x: Tensor, k: DWKernel, rotate: bool = False, counter: MulCounter | None = None) -> Tensor:
    """x2 depthwise deconvolution touching only real input samples.

    Pads one zero row on top and one zero column on the left, then slides a
    2x2 window [a b; c d] with stride 1; each window emits

        p11 = a*K11 + b*K13 + c*K31 + d*K33
        p12 = b*K12 + d*K32
        p21 = c*K21 + d*K23
        p22 = d*K22

    i.e. 9 multiplies per output patch. Set ``rotate`` for kernels exported
    by frameworks that store transposed-convolution taps flipped.
    """
    _check_channels(x, k.channels)
    taps, bias = _params(x, rotate180(k.taps) if rotate else k.taps, k.bias)
    return x.like(_deconv_fast_block(x, _pad_top_left(x.data), taps, bias, 0, x.height, 0, x.width, counter))


# ------------------------------------------------------- dense 3x3 (non-DS net)


def _exact_in_float(x: Tensor, terms: int) -> bool:
    if not x.is_fixed:
        return True
    bits = 2 * (x.qformat.total_bits - 1) + int(np.ceil(np.log2(max(terms, 1)))) + 1
    return bits < 53


def _matmul(x: Tensor, a, b, exact_float: bool):
    if x.is_fixed and exact_float:
        return np.rint(a.astype(np.float64) @ b.astype(np.float64)).astype(np.int64)
    return a @ b


_CHUNK_PIXELS = 8192


def conv3x3(x: Tensor, k: ConvKernel, stride: int = 1, counter: MulCounter | None = None) -> Tensor:
    """Dense 3x3 convolution, same padding.

    Evaluated as blocks of im2col rows against the (9*Ci, Co) tap matrix.
    """
    _check_channels(x, k.in_channels)
    _check_stride(stride)
    taps, bias = _params(x, k.taps, k.bias)
    exact = _exact_in_float(x, 9 * k.in_channels)
    s = stride
    oh, ow = _out_len(x.height, s), _out_len(x.width, s)
    ci, co = k.in_channels, k.out_channels
    src = _pad_same(x.data)
    wmat = np.ascontiguousarray(taps.transpose(2, 3, 1, 0).reshape(9 * ci, co))
    out = np.empty((oh, ow, co), dtype=src.dtype)
    rows = max(1, _CHUNK_PIXELS // ow)
    for y0 in range(0, oh, rows):
        y1 = min(oh, y0 + rows)
        cols = np.empty((y1 - y0, ow, 9, ci), dtype=src.dtype)
        for ky in range(3):
            for kx in range(3):
                cols[:, :, ky * 3 + kx] = src[y0 * s + ky:(y1 - 1) * s + ky + 1:s, kx:kx + (ow - 1) * s + 1:s]
        acc = _matmul(x, cols.reshape(-1, 9 * ci), wmat, exact)
        out[y0:y1] = _finish(x, acc + bias).reshape(y1 - y0, ow, co)
    _count(counter, oh * ow * 9 * ci * co)
    return x.like(out)


def deconv3x3(x: Tensor, k: ConvKernel, rotate: bool = False, counter: MulCounter | None = None) -> Tensor:
    """Dense x2 deconvolution using the same zero-skipping 2x2 window equations."""
    _check_channels(x, k.in_channels)
    taps, bias = _params(x, rotate180(k.taps) if rotate else k.taps, k.bias)
    exact = _exact_in_float(x, 4 * k.in_channels)
    h, w, co = x.height, x.width, k.out_channels
    src = _pad_top_left(x.data)
    a, b = src[:-1, :-1].reshape(h * w, -1), src[:-1, 1:].reshape(h * w, -1)
    c, d = src[1:, :-1].reshape(h * w, -1), src[1:, 1:].reshape(h * w, -1)

    def mm(v, ky, kx):
        _count(counter, v.shape[0] * taps.shape[0] * taps.shape[1])
        return _matmul(x, v, taps[:, :, ky, kx].T, exact)

    out = np.empty((2 * h, 2 * w, co), dtype=src.dtype)
    out[0::2, 0::2] = (mm(a, 0, 0) + mm(b, 0, 2) + mm(c, 2, 0) + mm(d, 2, 2)).reshape(h, w, co)
    out[0::2, 1::2] = (mm(b, 0, 1) + mm(d, 2, 1)).reshape(h, w, co)
    out[1::2, 0::2] = (mm(c, 1, 0) + mm(d, 1, 2)).reshape(h, w, co)
    out[1::2, 1::2] = mm(d, 1, 1).reshape(h, w, co)
    return x.like(_finish(x, out + bias))


# ------------------------------------------------------------- elementwise ops


def leaky_relu(x: Tensor) -> Tensor:
    """0.2 * min(v, 0) + max(v, 0)."""
    v = x.data
    if not x.is_fixed:
        # equal to 0.2*min(v,0) + max(v,0) for every finite v
        return x.like(np.where(v < 0, LEAKY_SLOPE * v, v))
    # exact integer 0.2 * v, ties away from zero
    neg = -((-v * 2 + 5) // 10)
    return x.like(np.where(v < 0, neg, v))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"cannot add {a.shape} and {b.shape}")
    if a.qformat != b.qformat:
        raise TypeError("operands use different number formats")
    if a.is_fixed:
        return a.like(saturate(a.data + b.data, a.qformat))
    return a.like(a.data + b.data)


# ------------------------------------------------------------------ tiling


def _tiles(n, size):
    return [(i, min(i + size, n)) for i in range(0, n, size)]


def _run(jobs):
    workers = threads()
    if workers == 1 or len(jobs) == 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda job: job(), jobs))


def tiled_execute(x: Tensor, op, kernel, cfg: TileConfig, **kwargs) -> Tensor:
    """Run ``op`` through on-chip-sized tiles and stitch the result.

    Channels are split into groups of ``cfg.channel_partition``. For the
    depthwise ops every group is independent; for ``pw_conv`` the groups
    partition the input channels and the partial sums are carried across
    groups in accumulator precision. Spatially the output grid is cut into
    ``buffer_height x buffer_width`` blocks (for the deconvolutions the block
    is counted in input windows). Each element is computed with the same
    arithmetic as the untiled op, so the result is bit-identical.
    """
    counter = kwargs.pop("counter", None)
    if op is pw_conv:
        return _tiled_pw(x, kernel, cfg, counter=counter, **kwargs)
    if op is dw_conv3x3:
        stride = kwargs.get("stride", 1)
        _check_stride(stride)
        grid = (_out_len(x.height, stride), _out_len(x.width, stride))
        prepare, scale = _pad_same, 1
        block = lambda sub, src, t, b, y0, y1, x0, x1: _dw_conv_block(
            sub, src, t, b, stride, y0, y1, x0, x1, counter)
    elif op is dw_deconv3x3_fast:
        grid = (x.height, x.width)
        prepare, scale = _pad_top_left, 2
        block = lambda sub, src, t, b, y0, y1, x0, x1: _deconv_fast_block(
            sub, src, t, b, y0, y1, x0, x1, counter)
    elif op is dw_deconv3x3_naive:
        grid = (x.height, x.width)
        prepare, scale = _interleave, 2
        block = lambda sub, src, t, b, y0, y1, x0, x1: _deconv_naive_block(
            sub, src, t, b, 2 * y0, 2 * y1, 2 * x0, 2 * x1, counter)
    else:
        raise ValueError(f"tiled_execute does not support {getattr(op, '__name__', op)!r}")

    _check_channels(x, kernel.channels)
    taps = rotate180(kernel.taps) if kwargs.get("rotate") else kernel.taps
    taps, bias = _params(x, taps, kernel.bias)
    out = np.empty((grid[0] * scale, grid[1] * scale, x.channels), dtype=x.data.dtype)
    bh = max(1, cfg.buffer_height // scale)
    bw = max(1, cfg.buffer_width // scale)

    jobs, slots = [], []
    for c0, c1 in _tiles(x.channels, cfg.channel_partition):
        src = prepare(x.data[:, :, c0:c1])
        for y0, y1 in _tiles(grid[0], bh):
            for x0, x1 in _tiles(grid[1], bw):
                jobs.append(lambda src=src, c0=c0, c1=c1, y0=y0, y1=y1, x0=x0, x1=x1:
                            block(x, src, taps[c0:c1], bias[c0:c1], y0, y1, x0, x1))
                slots.append((slice(y0 * scale, y1 * scale), slice(x0 * scale, x1 * scale), slice(c0, c1)))
    for slot, res in zip(slots, _run(jobs)):
        out[slot] = res
    return x.like(out)


def _tiled_pw(x: Tensor, k: PWKernel, cfg: TileConfig, stride=1, accum=None, counter=None) -> Tensor:
    _check_channels(x, k.in_channels)
    _check_stride(stride)
    xs = x.data[::stride, ::stride]
    oh, ow = xs.shape[:2]
    taps = quantize_array(k.taps, x.qformat) if x.is_fixed else k.taps
    out = np.empty((oh, ow, k.out_channels), dtype=x.data.dtype)

    def tile(y0, y1, x0, x1):
        patch = xs[y0:y1, x0:x1]
        n = patch.shape[0] * patch.shape[1]
        acc, fmt = _pw_init(x, k, n, accum)
        flat = patch.reshape(n, -1)
        for c0, c1 in _tiles(k.in_channels, cfg.channel_partition):
            _pw_accumulate(x, flat[:, c0:c1], taps[:, c0:c1], acc, fmt, counter)
        return _pw_finish(x, acc, fmt).reshape(y1 - y0, x1 - x0, -1)

    jobs, slots = [], []
    for y0, y1 in _tiles(oh, cfg.buffer_height):
        for x0, x1 in _tiles(ow, cfg.buffer_width):
            jobs.append(lambda y0=y0, y1=y1, x0=x0, x1=x1: tile(y0, y1, x0, x1))
            slots.append((slice(y0, y1), slice(x0, x1)))
    for slot, res in zip(slots, _run(jobs)):
        out[slot] = res
    return x.like(out)
