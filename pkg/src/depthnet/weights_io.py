"""Binary weight file.

Little-endian layout::

    b"DPNW"  u32 version (=1)  u32 entry count
    per entry: u16 path length, UTF-8 path, u8 rank, u32 x rank dims,
               float32 values in row-major order

Biases are ordinary entries whose path ends in ``/bias``.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .graph import NetworkSpec, Weights

MAGIC = b"DPNW"
VERSION = 1


class WeightFormatError(ValueError):
    pass


def save_weights(w: Weights, path: str | os.PathLike) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<II", VERSION, len(w)))
        for name, arr in w.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr)
            f.write(struct.pack("<H", len(raw)) + raw)
            f.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise WeightFormatError(f"truncated weight file at byte {self.pos}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_weights(path: str | os.PathLike, net: NetworkSpec | None = None) -> Weights:
    """Read a weight file; with ``net`` given, also check every layer is present and shaped."""
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != MAGIC:
        raise WeightFormatError("bad magic, not a DPNW weight file")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise WeightFormatError(f"unsupported weight file version {version}")
    w = Weights()
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        size = int(np.prod(dims, dtype=np.int64))
        w[name] = np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float32).reshape(dims)
    if r.pos != len(r.buf):
        raise WeightFormatError(f"{len(r.buf) - r.pos} trailing bytes after last entry")
    if net is not None:
        w.validate(net)
    return w
