"""16-bit binary PGM depth images.

Pixel value = round(depth_mm * 256 / 1000), 0 = invalid, saturating at 65535.
Same numbers as a KITTI depth PNG, in a container numpy can write directly.
"""

from __future__ import annotations

import os

import numpy as np

from .core import round_half_away
from .preprocess import DepthMap, _vals


def depth_to_pixels(depth_mm) -> np.ndarray:
    v = _vals(depth_mm).astype(np.float64)
    return np.clip(round_half_away(v * 256.0 / 1000.0), 0, 65535).astype(np.uint16)


def write_pgm(path: str | os.PathLike, depth) -> None:
    px = depth_to_pixels(depth)
    h, w = px.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(px.astype(">u2").tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Raw 16-bit pixel values."""
    with open(path, "rb") as f:
        data = f.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    pos += 1
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic != b"P5" or maxval != 65535:
        raise ValueError(f"{path}: not a 16-bit binary PGM")
    px = np.frombuffer(data, dtype=">u2", count=w * h, offset=pos)
    return px.reshape(h, w).astype(np.uint16)


def pixels_to_depth(px) -> DepthMap:
    return DepthMap(round_half_away(np.asarray(px, dtype=np.float64) * 1000.0 / 256.0).astype(np.int64), "Dense")
