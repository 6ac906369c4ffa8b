"""Compiled inner loops.

Every output element sums its terms in a fixed order (kernel index for the
depthwise window, input channel for pointwise) so tiled and untiled runs,
and the naive and fast deconvolutions, agree bit for bit. The innermost
loop runs over independent outputs so it vectorizes without reassociation.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def dw_window_sum(src, taps, stride, y0, y1, x0, x1):
    # taps: (9, C) in (ky, kx) order
    c = src.shape[2]
    out = np.zeros((y1 - y0, x1 - x0, c), dtype=src.dtype)
    for y in range(y1 - y0):
        for x in range(x1 - x0):
            sy = (y0 + y) * stride
            sx = (x0 + x) * stride
            acc = out[y, x]
            for ky in range(3):
                for kx in range(3):
                    t = taps[ky * 3 + kx]
                    v = src[sy + ky, sx + kx]
                    for ch in range(c):
                        acc[ch] += v[ch] * t[ch]
    return out


@numba.njit(cache=True)
def pw_accumulate_real(xs, wt, acc):
    # xs: (N, Ci), wt: (Ci, Co), acc: (N, Co) updated in place
    n, ci = xs.shape
    co = wt.shape[1]
    for p in range(n):
        a = acc[p]
        for i in range(ci):
            v = xs[p, i]
            w = wt[i]
            for o in range(co):
                a[o] += v * w[o]


@numba.njit(cache=True)
def pw_accumulate_fixed(xs, wt, acc, shift, lo, hi):
    # products carry 2f fractional bits; shift moves them to the accumulator format
    n, ci = xs.shape
    co = wt.shape[1]
    half = np.int64(1) << (shift - 1) if shift > 0 else np.int64(0)
    for p in range(n):
        a = acc[p]
        for i in range(ci):
            v = xs[p, i]
            w = wt[i]
            for o in range(co):
                prod = v * w[o]
                if shift > 0:
                    m = (abs(prod) + half) >> shift
                    prod = -m if prod < 0 else m
                elif shift < 0:
                    prod = prod << (-shift)
                s = a[o] + prod
                a[o] = min(max(s, lo), hi)
