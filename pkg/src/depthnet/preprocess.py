"""Everything around the CNN: projection, hole filling, scaling, recombination.

Depth maps hold integer millimetres with 0 meaning "no return".
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numba
import numpy as np

from .core import Tensor, round_half_away

DEFAULT_SCALE_MM = 100_000.0
CROP_HEIGHT = 256
CROP_WIDTH = 1216


class InputError(ValueError):
    """Input data cannot be processed (empty cloud, no valid pixels, ...)."""


class CalibrationError(ValueError):
    pass


@dataclass
class PointCloud:
    """N x 4 array of (x, y, z [m], intensity).

    ``span_deg`` records the azimuth arc a sensor sweep covered, when known.
    """

    points: np.ndarray
    span_deg: float | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] not in (3, 4):
            raise ValueError(f"points must be N x 3 or N x 4, got {pts.shape}")
        if pts.shape[1] == 3:
            pts = np.hstack([pts, np.zeros((len(pts), 1))])
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        self.points = pts

    def __len__(self):
        return len(self.points)

    @property
    def xyz(self):
        return self.points[:, :3]

    @property
    def intensity(self):
        return self.points[:, 3]


def _affine(m, name):
    m = np.asarray(m, dtype=np.float64)
    if m.shape == (3, 3):
        out = np.eye(4)
        out[:3, :3] = m
        return out
    if m.shape == (3, 4):
        out = np.eye(4)
        out[:3] = m
        return out
    if m.shape != (4, 4) or not np.allclose(m[3], [0, 0, 0, 1]):
        raise CalibrationError(f"{name} must be 3x3, 3x4 or affine 4x4")
    return m


@dataclass
class Calibration:
    """Camera projection P (3x4), rectification R and LiDAR-to-camera T (4x4 affine)."""

    P: np.ndarray
    R: np.ndarray
    T: np.ndarray
    image_width: int = 1242
    image_height: int = 375

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64).reshape(3, 4)
        self.R = _affine(self.R, "R")
        self.T = _affine(self.T, "T")

    def matrix(self) -> np.ndarray:
        """Combined 3x4 map from homogeneous LiDAR points to homogeneous pixels."""
        if abs(np.linalg.det(self.T[:3, :3])) < 1e-12:
            raise CalibrationError("LiDAR-to-camera transform is not invertible")
        return self.P @ self.R @ self.T


@dataclass
class DepthMap:
    values: np.ndarray  # (H, W) int64 millimetres, 0 = missing
    role: str = "Sparse"

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValueError(f"depth map must be 2-D, got shape {v.shape}")
        if np.any(v < 0):
            raise ValueError("depth values must be non-negative")
        self.values = v.astype(np.int64)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    @property
    def valid(self):
        return self.values > 0


def _vals(m) -> np.ndarray:
    return m.values if isinstance(m, DepthMap) else np.asarray(m)


def project(cloud: PointCloud, calib: Calibration) -> DepthMap:
    """Z-buffered sparse depth map in the full image frame.

    Pixel = (round(px/pz), round(py/pz)) of P.R.T.[x y z 1]; depth = pz in mm.
    """
    m = calib.matrix()
    homo = np.hstack([cloud.xyz, np.ones((len(cloud), 1))])
    p = homo @ m.T
    pz = p[:, 2]
    front = pz > 0
    p, pz = p[front], pz[front]
    u = np.floor(p[:, 0] / pz + 0.5)
    v = np.floor(p[:, 1] / pz + 0.5)
    depth = np.floor(pz * 1000.0 + 0.5).astype(np.int64)
    keep = (u >= 0) & (u < calib.image_width) & (v >= 0) & (v < calib.image_height) & (depth > 0)
    flat = v[keep].astype(np.int64) * calib.image_width + u[keep].astype(np.int64)
    zbuf = np.full(calib.image_height * calib.image_width, np.iinfo(np.int64).max, dtype=np.int64)
    np.minimum.at(zbuf, flat, depth[keep])
    zbuf[zbuf == np.iinfo(np.int64).max] = 0
    return DepthMap(zbuf.reshape(calib.image_height, calib.image_width), "Sparse")


def crop(m, height: int = CROP_HEIGHT, width: int = CROP_WIDTH) -> DepthMap:
    """Bottom-centre window."""
    v = _vals(m)
    h, w = v.shape
    if h < height or w < width:
        raise InputError(f"image {w}x{h} is smaller than the {width}x{height} crop")
    x0 = (w - width) // 2
    role = m.role if isinstance(m, DepthMap) else "Sparse"
    return DepthMap(v[h - height:, x0:x0 + width].copy(), role)


def top_fill(m) -> DepthMap:
    """Give every pixel above a column's topmost return that return's value."""
    v = _vals(m).astype(np.int64).copy()
    valid = v > 0
    has = valid.any(axis=0)
    first = np.argmax(valid, axis=0)
    rows = np.arange(v.shape[0])[:, None]
    above = (rows < first[None, :]) & has[None, :]
    v[above] = np.broadcast_to(v[first, np.arange(v.shape[1])], v.shape)[above]
    return DepthMap(v, "Sparse")


@numba.njit(cache=True)
def _nearest_valid(valid, values, out_vals, want_index):
    """Row/col of each pixel's nearest valid pixel (exact Euclidean).

    Ties go to the smaller row, then the smaller column. Both are folded into
    one integer key d2*M^2 + row*M + col, which is a shifted parabola in the
    query column, so the usual lower-envelope sweep applies with exact
    integer breakpoints.
    """
    h, w = valid.shape
    big = max(h, w) + 1
    m2 = np.int64(big) * big
    # column pass as two row sweeps (row-major friendly): nearest valid row
    # within each column, the upper one on ties
    near_row = np.empty((h, w), dtype=np.int32)
    last = np.full(w, -1, dtype=np.int32)
    for y in range(h):
        for x in range(w):
            if valid[y, x]:
                last[x] = y
            near_row[y, x] = last[x]
    nxt = np.full(w, -1, dtype=np.int32)
    for y in range(h - 1, -1, -1):
        for x in range(w):
            if valid[y, x]:
                nxt[x] = y
            best = near_row[y, x]
            if nxt[x] >= 0 and (best < 0 or nxt[x] - y < y - best):
                near_row[y, x] = nxt[x]

    n = h if want_index else 0
    out_row = np.empty((n, w), dtype=np.int32)
    out_col = np.empty((n, w), dtype=np.int32)
    v = np.empty(w, dtype=np.int64)
    z = np.empty(w + 1, dtype=np.int64)
    f = np.empty(w, dtype=np.int64)
    neg_inf = -(np.int64(1) << 62)
    for y in range(h):
        k = -1
        for q in range(w):
            r = near_row[y, q]
            if r < 0:
                continue
            g = y - r
            fq = m2 * (np.int64(q) * q + np.int64(g) * g) + np.int64(r) * big + q
            while True:
                if k < 0:
                    k = 0
                    v[0] = q
                    z[0] = neg_inf
                    f[0] = fq
                    break
                p = v[k]
                # q wins for integer x > s
                s = (fq - f[k]) // (2 * m2 * (q - p))
                if s <= z[k]:
                    k -= 1
                    continue
                k += 1
                v[k] = q
                z[k] = s
                f[k] = fq
                break
        k_top = k
        k = 0
        for x in range(w):
            while k < k_top and z[k + 1] < x:
                k += 1
            c = v[k]
            r = near_row[y, c]
            out_vals[y, x] = values[r, c]
            if want_index:
                out_col[y, x] = c
                out_row[y, x] = r
    return out_row, out_col


def nearest_valid(valid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    valid = np.ascontiguousarray(valid, dtype=np.bool_)
    if not valid.any():
        raise InputError("depth map has no valid pixels")
    scratch = np.empty(valid.shape, dtype=np.int64)
    return _nearest_valid(valid, scratch, scratch, True)


def dt_fill(m) -> DepthMap:
    """Fill each empty pixel with its nearest valid neighbour's depth, in O(H*W)."""
    v = np.ascontiguousarray(_vals(m), dtype=np.int64)
    valid = v > 0
    if not valid.any():
        raise InputError("depth map has no valid pixels")
    out = np.empty_like(v)
    _nearest_valid(valid, v, out, False)
    return DepthMap(out, "Coarse")


def normalize(m, scale_mm: float = DEFAULT_SCALE_MM) -> Tensor:
    if scale_mm <= 0:
        raise ValueError("scale_mm must be positive")
    return Tensor(np.clip(_vals(m) / scale_mm, 0.0, 1.0)[:, :, None])


def combine(coarse, residual: Tensor, scale_mm: float = DEFAULT_SCALE_MM) -> DepthMap:
    """dense = max(0, coarse + residual * scale), rounded to whole millimetres."""
    c = _vals(coarse)
    r = residual.to_real()[:, :, 0] if isinstance(residual, Tensor) else np.asarray(residual)
    if r.shape != c.shape:
        raise ValueError(f"residual {r.shape} does not match coarse map {c.shape}")
    dense = np.maximum(0.0, round_half_away(c + r * scale_mm))
    return DepthMap(dense.astype(np.int64), "Dense")


def run_pipeline(
    cloud: PointCloud,
    calib: Calibration,
    net,
    weights,
    scale_mm: float = DEFAULT_SCALE_MM,
    fixed=None,
    tile=None,
    timings: dict | None = None,
) -> DepthMap:
    """Cloud to dense depth: project, crop, top-fill, DT, normalize, CNN, combine.

    Per-stage wall-clock seconds are written into ``timings`` when given.
    """
    from .graph import forward

    if len(cloud) == 0:
        raise InputError("point cloud is empty")
    h, w, _ = net.input_shape
    clock = time.perf_counter()
    stamps = {}

    def mark(stage):
        nonlocal clock
        now = time.perf_counter()
        stamps[stage] = now - clock
        clock = now

    sparse = crop(project(cloud, calib), h, w)
    mark("project")
    filled = top_fill(sparse)
    coarse = dt_fill(filled)
    mark("dt")
    residual = forward(net, weights, normalize(coarse, scale_mm), fixed=fixed, tile=tile)
    mark("cnn")
    dense = combine(coarse, residual, scale_mm)
    mark("combine")
    if timings is not None:
        timings.update(stamps)
    return dense


# -------------------------------------------------------------- test scenes


def kitti_like_calibration(image_width: int = 1242, image_height: int = 375) -> Calibration:
    """Pinhole camera with KITTI-like intrinsics and identity extrinsics."""
    P = np.array([[721.5377, 0.0, 609.5593, 0.0],
                  [0.0, 721.5377, 172.854, 0.0],
                  [0.0, 0.0, 1.0, 0.0]])
    return Calibration(P, np.eye(4), np.eye(4), image_width, image_height)


def synthetic_plane(calib: Calibration, depth_m: float = 20.0, lines: int = 64, points_per_line: int = 2000) -> PointCloud:
    """Fronto-parallel plane at ``depth_m`` sampled on horizontal scanlines.

    Points are generated in camera coordinates; they are only meaningful with
    identity R and T.
    """
    fx, cx = calib.P[0, 0], calib.P[0, 2]
    fy, cy = calib.P[1, 1], calib.P[1, 2]
    vs = np.linspace(0, calib.image_height - 1, lines)
    us = np.linspace(0, calib.image_width - 1, points_per_line)
    uu, vv = np.meshgrid(us, vs)
    x = (uu - cx) / fx * depth_m
    y = (vv - cy) / fy * depth_m
    z = np.full_like(x, depth_m)
    return PointCloud(np.stack([x.ravel(), y.ravel(), z.ravel(), np.ones(x.size)], axis=1))
