"""Feature-map container and signed fixed-point arithmetic.

Tensors are H x W x C, row-major with the channel index varying fastest, so
element ``(y, x, c)`` lives at flat offset ``(y * width + x) * channels + c``.
A tensor is either real (float64 samples) or fixed-point (int64 raw integers
interpreted through a :class:`QFormat`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    """Raised when tensor shapes or channel counts do not line up."""


@dataclass(frozen=True)
class QFormat:
    """Signed two's-complement format with ``frac_bits`` fractional bits."""

    total_bits: int = 16
    frac_bits: int = 8

    def __post_init__(self):
        if not 8 <= self.total_bits <= 32:
            raise ValueError(f"total_bits must be in [8, 32], got {self.total_bits}")
        if not 0 <= self.frac_bits < self.total_bits:
            raise ValueError(f"frac_bits must be in [0, total_bits), got {self.frac_bits}")

    @property
    def raw_min(self) -> int:
        return -(1 << (self.total_bits - 1))

    @property
    def raw_max(self) -> int:
        return (1 << (self.total_bits - 1)) - 1

    @property
    def lsb(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def min_value(self) -> float:
        return self.raw_min * self.lsb

    @property
    def max_value(self) -> float:
        return self.raw_max * self.lsb

    @classmethod
    def parse(cls, text: str) -> "QFormat":
        """Parse ``"TOTAL:FRAC"`` (e.g. ``"16:8"``)."""
        try:
            total, frac = (int(p) for p in text.split(":"))
        except ValueError:
            raise ValueError(f"expected TOTAL:FRAC, got {text!r}") from None
        return cls(total, frac)

    def __str__(self):
        return f"Q({self.total_bits},{self.frac_bits})"


FEATURE_FORMAT = QFormat(16, 8)
ACCUM_FORMAT = QFormat(32, 16)


def round_half_away(x):
    """Round to nearest integer, ties away from zero (numpy rounds ties to even)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def saturate(raw, q: QFormat):
    return np.clip(raw, q.raw_min, q.raw_max)


def shift_round(raw, shift: int):
    """Scale integer ``raw`` by ``2**-shift`` with round-half-away-from-zero.

    Negative ``shift`` is an exact left shift.
    """
    raw = np.asarray(raw, dtype=np.int64)
    if shift <= 0:
        return raw << -shift
    half = np.int64(1) << (shift - 1)
    mag = (np.abs(raw) + half) >> shift
    return np.where(raw < 0, -mag, mag)


def requantize(raw, from_frac: int, q: QFormat):
    """Move integers with ``from_frac`` fractional bits into format ``q``."""
    return saturate(shift_round(raw, from_frac - q.frac_bits), q)


class Tensor:
    """Dense H x W x C feature map, real or fixed-point.

    ``data`` is a C-ordered ndarray of shape (H, W, C): float64 for real
    tensors, int64 raw values when ``qformat`` is set.
    """

    __slots__ = ("data", "qformat")

    def __init__(self, data, qformat: QFormat | None = None):
        arr = np.asarray(data)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise DimensionError(f"tensor must be H x W x C, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise DimensionError(f"tensor dimensions must be >= 1, got {arr.shape}")
        if qformat is None:
            arr = np.ascontiguousarray(arr, dtype=np.float64)
        else:
            if not np.issubdtype(arr.dtype, np.integer):
                raise TypeError("fixed-point tensors hold integer raw values")
            arr = np.ascontiguousarray(arr, dtype=np.int64)
        self.data = arr
        self.qformat = qformat

    @classmethod
    def zeros(cls, height, width, channels, qformat=None):
        dtype = np.float64 if qformat is None else np.int64
        return cls(np.zeros((height, width, channels), dtype=dtype), qformat)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def is_fixed(self) -> bool:
        return self.qformat is not None

    @property
    def elements(self) -> np.ndarray:
        """Flat row-major view of the samples."""
        return self.data.reshape(-1)

    def index(self, y: int, x: int, c: int) -> int:
        if not (0 <= y < self.height and 0 <= x < self.width and 0 <= c < self.channels):
            raise IndexError((y, x, c))
        return (y * self.width + x) * self.channels + c

    def __getitem__(self, yxc):
        return self.elements[self.index(*yxc)]

    def __setitem__(self, yxc, value):
        self.elements[self.index(*yxc)] = value

    def like(self, data) -> "Tensor":
        return Tensor(data, self.qformat)

    def to_real(self) -> np.ndarray:
        if self.qformat is None:
            return self.data
        return self.data * self.qformat.lsb

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.qformat == other.qformat and np.array_equal(self.data, other.data)

    def __repr__(self):
        kind = "real" if self.qformat is None else str(self.qformat)
        return f"Tensor({self.height}x{self.width}x{self.channels}, {kind})"


def quantize(t, q: QFormat = FEATURE_FORMAT) -> Tensor:
    """Real tensor (or array) to fixed point: round half away, saturate."""
    values = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    if isinstance(t, Tensor) and t.is_fixed:
        raise TypeError("tensor is already fixed-point")
    return Tensor(quantize_array(values, q).astype(np.int64), q)


def quantize_array(values, q: QFormat) -> np.ndarray:
    """Raw integers for ``values`` in format ``q`` (any array shape)."""
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("cannot quantize non-finite values")
    with np.errstate(over="ignore"):  # +-inf clips to the bounds like any large value
        scaled = np.clip(values * 2.0 ** q.frac_bits, q.raw_min - 1.0, q.raw_max + 1.0)
    return saturate(round_half_away(scaled), q).astype(np.int64)


def dequantize(t: Tensor) -> Tensor:
    if not t.is_fixed:
        raise TypeError("dequantize expects a fixed-point tensor")
    return Tensor(t.data.astype(np.float64) * t.qformat.lsb)
