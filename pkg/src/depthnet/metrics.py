"""Depth completion error metrics (mm for depth, 1/km for inverse depth)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .preprocess import InputError, _vals


@dataclass(frozen=True)
class MetricReport:
    rmse_mm: float
    mae_mm: float
    irmse: float
    imae: float
    valid_pixels: int
    inverse_excluded: int = 0

    def to_line(self) -> str:
        return (f"rmse_mm={self.rmse_mm:.4f} mae_mm={self.mae_mm:.4f} irmse={self.irmse:.4f} "
                f"imae={self.imae:.4f} valid_pixels={self.valid_pixels} "
                f"inverse_excluded={self.inverse_excluded}")

    @classmethod
    def from_line(cls, line: str) -> "MetricReport":
        kv = dict(item.split("=", 1) for item in line.split())
        return cls(float(kv["rmse_mm"]), float(kv["mae_mm"]), float(kv["irmse"]), float(kv["imae"]),
                   int(kv["valid_pixels"]), int(kv.get("inverse_excluded", 0)))


def evaluate(pred, gt) -> MetricReport:
    """Errors over pixels where the ground truth is non-zero.

    Inverse depth is 1e6 / depth_mm (1/km). Predicted zeros inside the valid
    set count towards the mm metrics but are left out of the inverse ones.
    """
    p = _vals(pred).astype(np.float64)
    g = _vals(gt).astype(np.float64)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ in size")
    mask = g > 0
    n = int(mask.sum())
    if n == 0:
        raise InputError("ground truth has no valid pixels")
    err = p[mask] - g[mask]
    rmse = float(np.sqrt(np.mean(err ** 2)))
    mae = float(np.mean(np.abs(err)))

    pv, gv = p[mask], g[mask]
    usable = pv > 0
    if usable.any():
        ierr = 1e6 / pv[usable] - 1e6 / gv[usable]
        irmse = float(np.sqrt(np.mean(ierr ** 2)))
        imae = float(np.mean(np.abs(ierr)))
    else:
        irmse = imae = 0.0
    return MetricReport(rmse, mae, irmse, imae, n, int((~usable).sum()))
