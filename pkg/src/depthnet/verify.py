"""Seeded self-checks: each fast path against an independent slow route."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import QFormat, Tensor, quantize
from .graph import build_depthnet
from .kernels import (
    DWKernel,
    PWKernel,
    TileConfig,
    dw_conv3x3,
    dw_deconv3x3_fast,
    dw_deconv3x3_naive,
    pw_conv,
    tiled_execute,
)
from .preprocess import dt_fill

PARTITIONS = (1, 2, 4, 8, 32)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    cases: int
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{status} {self.name}: {self.cases} cases{extra}"


def _random_input(rng, h, w, c, fixed: bool, q=QFormat(16, 8)) -> Tensor:
    x = Tensor(rng.uniform(-4.0, 4.0, size=(h, w, c)))
    return quantize(x, q) if fixed else x


def _dw_kernel(rng, c) -> DWKernel:
    return DWKernel(rng.uniform(-1, 1, (c, 3, 3)), rng.uniform(-1, 1, c))


def deconv_suite(cases: int, rng, fault: bool = False, max_hw: int = 64, max_c: int = 8) -> SuiteResult:
    """Zero-skipping deconvolution versus interleave-and-convolve, real and fixed."""
    failures = 0
    for i in range(cases):
        h, w = rng.integers(1, max_hw + 1, size=2)
        c = int(rng.integers(1, max_c + 1))
        x = _random_input(rng, h, w, c, fixed=bool(i % 2))
        k = _dw_kernel(rng, c)
        ref = dw_deconv3x3_naive(x, k).data
        if fault:
            ref = ref.copy()
            ref.flat[int(rng.integers(ref.size))] += 1
        failures += not np.array_equal(dw_deconv3x3_fast(x, k).data, ref)
    return SuiteResult("deconv fast == naive", failures == 0, cases, f"{failures} mismatches" if failures else "")


def tiling_suite(cases: int, rng) -> SuiteResult:
    """Channel/spatial tiling versus direct calls for every PE kernel."""
    failures = checks = 0
    for i in range(cases):
        h, w = rng.integers(1, 40, size=2)
        c = int(rng.integers(1, 70))
        fixed = bool(i % 2)
        x = _random_input(rng, h, w, c, fixed)
        dk = _dw_kernel(rng, c)
        co = int(rng.integers(1, 40))
        pk = PWKernel(rng.uniform(-1, 1, (co, c)), rng.uniform(-1, 1, co))
        stride = int(rng.integers(1, 3))
        for p in PARTITIONS:
            cfg = TileConfig(p, int(rng.integers(3, 20)), int(rng.integers(3, 20)))
            pairs = [
                (tiled_execute(x, dw_conv3x3, dk, cfg, stride=stride), dw_conv3x3(x, dk, stride)),
                (tiled_execute(x, dw_deconv3x3_fast, dk, cfg), dw_deconv3x3_fast(x, dk)),
                (tiled_execute(x, pw_conv, pk, cfg, stride=stride), pw_conv(x, pk, stride)),
            ]
            for tiled, direct in pairs:
                checks += 1
                failures += not np.array_equal(tiled.data, direct.data)
    return SuiteResult("tiled == untiled", failures == 0, checks, f"{failures} mismatches" if failures else "")


def brute_force_fill(values: np.ndarray) -> np.ndarray:
    """O(N*M) nearest valid pixel with the (distance, row, column) tie order."""
    ys, xs = np.nonzero(values > 0)
    h, w = values.shape
    out = np.empty_like(values)
    gy, gx = np.mgrid[:h, :w]
    for row in range(h):
        d = (gy[row, :, None] - ys) ** 2 + (gx[row, :, None] - xs) ** 2
        order = np.lexsort((np.broadcast_to(xs, d.shape), np.broadcast_to(ys, d.shape), d), axis=-1)
        best = order[:, 0]
        out[row] = values[ys[best], xs[best]]
    return out


def dt_suite(cases: int, rng, shape=(64, 48)) -> SuiteResult:
    failures = 0
    for _ in range(cases):
        density = rng.uniform(0.01, 0.20)
        v = (rng.random(shape) < density) * rng.integers(1, 80_000, size=shape)
        if not (v > 0).any():
            v[rng.integers(shape[0]), rng.integers(shape[1])] = 1
        failures += not np.array_equal(dt_fill(v).values, brute_force_fill(v))
    return SuiteResult("distance transform == brute force", failures == 0, cases,
                       f"{failures} mismatches" if failures else "")


def ds_ratio_suite() -> SuiteResult:
    """Separable/dense tap ratio is exactly 1/Co + 1/9 for every 3x3 layer."""
    from fractions import Fraction

    std = {layer.path: layer for layer in build_depthnet(False).layers()}
    bad = []
    n = 0
    for layer in build_depthnet(True).layers():
        if layer.op == "conv1x1":
            continue
        n += 1
        if Fraction(layer.taps(), std[layer.path].taps()) != Fraction(1, layer.cout) + Fraction(1, 9):
            bad.append(layer.path)
    return SuiteResult("DS tap ratio 1/Co + 1/9", not bad, n, ", ".join(bad))


def run_all(cases: int = 1000, seed: int = 0, fault: bool = False) -> list[SuiteResult]:
    rng = np.random.default_rng(seed)
    return [
        deconv_suite(cases, rng, fault=fault),
        tiling_suite(max(1, cases // 50), rng),
        dt_suite(max(1, cases // 10), rng),
        ds_ratio_suite(),
    ]
