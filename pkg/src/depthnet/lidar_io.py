"""LiDAR ingestion: VLP-16 UDP packets, revolution assembly, KITTI files.

A VLP-16 data packet is 1206 bytes: 12 blocks of 100 bytes, then a u32
timestamp (microseconds) and two factory bytes. Each block starts with the
flag bytes ``FF EE``, a little-endian u16 azimuth in hundredths of a degree,
and 32 returns of (u16 distance in 2 mm units, u8 reflectivity): two firing
sequences of the 16 lasers.
"""

from __future__ import annotations

import collections
import logging
import os
import socket
import threading
from dataclasses import dataclass

import numpy as np

from .preprocess import Calibration, PointCloud

log = logging.getLogger(__name__)

PACKET_SIZE = 1206
BLOCKS = 12
RETURNS = 32
BLOCK_FLAG = 0xFFEE
DISTANCE_UNIT_M = 0.002
DEFAULT_PORT = 2368

_RETURN = np.dtype([("distance", "<u2"), ("reflectivity", "u1")])
_BLOCK = np.dtype([("flag", ">u2"), ("azimuth", "<u2"), ("returns", _RETURN, (RETURNS,))])
_PACKET = np.dtype([("blocks", _BLOCK, (BLOCKS,)), ("timestamp", "<u4"), ("factory", "u1", (2,))])
assert _PACKET.itemsize == PACKET_SIZE


class PacketError(ValueError):
    pass


class TruncatedPacketError(PacketError):
    pass


class PacketFormatError(PacketError):
    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block


class CalibFormatError(ValueError):
    pass


class CaptureError(OSError):
    pass


@dataclass
class VelodynePacket:
    azimuth: np.ndarray  # (12,) hundredths of a degree
    distance: np.ndarray  # (12, 32) 2 mm units
    reflectivity: np.ndarray  # (12, 32)
    timestamp: int
    factory: bytes


@dataclass(frozen=True)
class LaserTable:
    vertical_deg: tuple
    vertical_offset_m: tuple = (0.0,) * 16

    def __post_init__(self):
        if len(self.vertical_deg) != 16 or len(self.vertical_offset_m) != 16:
            raise ValueError("laser table needs 16 entries")
        if not all(-15.0 <= a <= 15.0 for a in self.vertical_deg):
            raise ValueError("vertical angles must lie within [-15, 15] degrees")


# laser id order as fired, interleaved low/high
VLP16 = LaserTable((-15, 1, -13, 3, -11, 5, -9, 7, -7, 9, -5, 11, -3, 13, -1, 15))


def parse_packet(data: bytes) -> VelodynePacket:
    if len(data) != PACKET_SIZE:
        raise TruncatedPacketError(f"packet is {len(data)} bytes, expected {PACKET_SIZE}")
    rec = np.frombuffer(data, dtype=_PACKET, count=1)[0]
    blocks = rec["blocks"]
    flags = blocks["flag"]
    bad = np.flatnonzero(flags != BLOCK_FLAG)
    if bad.size:
        i = int(bad[0])
        raise PacketFormatError(f"block {i} has flag 0x{int(flags[i]):04X}, expected 0x{BLOCK_FLAG:04X}", block=i)
    az = blocks["azimuth"].astype(np.int64)
    over = np.flatnonzero(az >= 36000)
    if over.size:
        i = int(over[0])
        raise PacketFormatError(f"block {i} azimuth {int(az[i])} out of range", block=i)
    return VelodynePacket(
        azimuth=az,
        distance=blocks["returns"]["distance"].astype(np.int64),
        reflectivity=blocks["returns"]["reflectivity"].astype(np.int64),
        timestamp=int(rec["timestamp"]),
        factory=bytes(rec["factory"]),
    )


def encode_packet(azimuth, distance, reflectivity=None, timestamp=0, factory=b"\x37\x22") -> bytes:
    """Serialize block fields into a 1206-byte payload (fixtures, replay)."""
    rec = np.zeros(1, dtype=_PACKET)
    blocks = rec["blocks"][0]
    blocks["flag"] = BLOCK_FLAG
    blocks["azimuth"] = np.asarray(azimuth)
    blocks["returns"]["distance"] = np.asarray(distance).reshape(BLOCKS, RETURNS)
    if reflectivity is not None:
        blocks["returns"]["reflectivity"] = np.asarray(reflectivity).reshape(BLOCKS, RETURNS)
    rec["timestamp"] = timestamp
    rec["factory"][0] = np.frombuffer(factory, dtype=np.uint8)
    return rec.tobytes()


def _firing_azimuths(az: np.ndarray) -> np.ndarray:
    """(B, 2) azimuths in hundredths of a degree for the two firing sequences of each block.

    The second sequence sits midway to the next block; the last block reuses
    the preceding gap.
    """
    gaps = np.mod(np.diff(az), 36000)
    if gaps.size == 0:
        gaps = np.zeros(1, dtype=np.int64)
    gaps = np.append(gaps, gaps[-1])
    return np.stack([az, az + gaps / 2.0], axis=1)


def blocks_to_cloud(az, distance, reflectivity, table: LaserTable = VLP16) -> PointCloud:
    az = np.asarray(az, dtype=np.int64)
    distance = np.asarray(distance).reshape(len(az), RETURNS)
    reflectivity = np.asarray(reflectivity).reshape(len(az), RETURNS)
    fire = _firing_azimuths(az) if len(az) else np.zeros((0, 2))
    alpha = np.deg2rad(np.repeat(fire, 16, axis=1) / 100.0)
    laser = np.tile(np.arange(16), 2)
    omega = np.deg2rad(np.asarray(table.vertical_deg, dtype=np.float64))[laser]
    offset = np.asarray(table.vertical_offset_m, dtype=np.float64)[laser]
    r = distance * DISTANCE_UNIT_M
    keep = distance > 0
    cw = np.cos(omega)
    x = r * cw * np.sin(alpha)
    y = r * cw * np.cos(alpha)
    z = r * np.sin(omega) + offset
    pts = np.stack([x[keep], y[keep], z[keep], reflectivity[keep].astype(np.float64)], axis=1)
    return PointCloud(pts)


def packets_to_cloud(packets, table: LaserTable = VLP16) -> PointCloud:
    packets = list(packets)
    if not packets:
        return PointCloud(np.zeros((0, 4)))
    az = np.concatenate([p.azimuth for p in packets])
    dist = np.concatenate([p.distance for p in packets])
    refl = np.concatenate([p.reflectivity for p in packets])
    return blocks_to_cloud(az, dist, refl, table)


class RevolutionAssembler:
    """Cuts a block stream into 360-degree sweeps at the azimuth wrap.

    Sweeps covering less than ``min_span_deg`` (typically the partial first
    one after start-up) are dropped.
    """

    def __init__(self, table: LaserTable = VLP16, min_span_deg: float = 350.0):
        self.table = table
        self.min_span = min_span_deg * 100
        self._az, self._dist, self._refl = [], [], []

    def feed(self, packet: VelodynePacket) -> list[PointCloud]:
        out = []
        for b in range(BLOCKS):
            a = int(packet.azimuth[b])
            if self._az and a < self._az[-1]:
                cloud = self._finish()
                if cloud is not None:
                    out.append(cloud)
            self._az.append(a)
            self._dist.append(packet.distance[b])
            self._refl.append(packet.reflectivity[b])
        return out

    def flush(self) -> PointCloud | None:
        return self._finish()

    def _finish(self):
        if not self._az:
            return None
        az = np.array(self._az)
        span = az[-1] - az[0] + (_firing_azimuths(az)[-1, 1] - az[-1] if len(az) > 1 else 0)
        cloud = None
        if span >= self.min_span:
            cloud = blocks_to_cloud(az, np.array(self._dist), np.array(self._refl), self.table)
            cloud.span_deg = float(span) / 100.0
        self._az, self._dist, self._refl = [], [], []
        return cloud


class FrameQueue:
    """Bounded hand-off between capture and processing; drops the oldest frame when full."""

    def __init__(self, capacity: int = 2):
        self._items = collections.deque(maxlen=capacity)
        self._cond = threading.Condition()
        self.dropped = 0

    def put(self, item) -> None:
        with self._cond:
            if len(self._items) == self._items.maxlen:
                self.dropped += 1
            self._items.append(item)
            self._cond.notify()

    __call__ = put

    def get(self, timeout: float | None = None):
        with self._cond:
            if not self._cond.wait_for(lambda: self._items, timeout):
                raise TimeoutError("no frame available")
            return self._items.popleft()

    def __len__(self):
        with self._cond:
            return len(self._items)


@dataclass
class CaptureStats:
    packets: int = 0
    malformed: int = 0
    frames: int = 0


class UdpCapture:
    """Receives VLP-16 datagrams and emits one PointCloud per revolution.

    Malformed datagrams are counted and skipped.
    """

    def __init__(self, port: int = DEFAULT_PORT, host: str = "0.0.0.0", table: LaserTable = VLP16):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            self.sock.bind((host, port))
        except OSError as exc:
            self.sock.close()
            raise CaptureError(f"cannot bind UDP {host}:{port}: {exc}") from exc
        self.port = self.sock.getsockname()[1]
        self.assembler = RevolutionAssembler(table)
        self.stats = CaptureStats()

    def handle(self, data: bytes, sink) -> None:
        self.stats.packets += 1
        try:
            packet = parse_packet(data)
        except PacketError as exc:
            self.stats.malformed += 1
            log.debug("skipping packet: %s", exc)
            return
        for cloud in self.assembler.feed(packet):
            self.stats.frames += 1
            sink(cloud)

    def run(self, sink, stop: threading.Event | None = None, idle_timeout: float | None = None,
            max_frames: int | None = None, poll: float = 0.05) -> CaptureStats:
        """Receive until ``stop`` is set, ``max_frames`` emitted, or ``idle_timeout`` seconds pass quietly."""
        stop = stop or threading.Event()
        self.sock.settimeout(poll)
        idle = 0.0
        try:
            while not stop.is_set():
                if max_frames is not None and self.stats.frames >= max_frames:
                    break
                try:
                    data = self.sock.recv(4096)
                except socket.timeout:
                    idle += poll
                    if idle_timeout is not None and idle >= idle_timeout:
                        break
                    continue
                idle = 0.0
                self.handle(data, sink)
            if max_frames is None or self.stats.frames < max_frames:
                cloud = self.assembler.flush()
                if cloud is not None:
                    self.stats.frames += 1
                    sink(cloud)
        finally:
            self.sock.close()
        return self.stats


def udp_capture(port: int, frame_sink, stop: threading.Event | None = None, **kwargs) -> CaptureStats:
    return UdpCapture(port).run(frame_sink, stop, **kwargs)


# --------------------------------------------------------------- KITTI files


def read_kitti_bin(path: str | os.PathLike) -> PointCloud:
    size = os.path.getsize(path)
    if size % 16:
        raise ValueError(f"{path}: size {size} is not a multiple of 16 bytes")
    return PointCloud(np.fromfile(path, dtype="<f4").reshape(-1, 4).astype(np.float64))


def write_kitti_bin(cloud: PointCloud, path: str | os.PathLike) -> None:
    cloud.points.astype("<f4").tofile(path)


_CALIB_KEYS = {"P2": (3, 4), "R0_rect": (3, 3), "Tr_velo_to_cam": (3, 4)}


def read_calib(path: str | os.PathLike, image_width: int = 1242, image_height: int = 375) -> Calibration:
    """KITTI object-style calibration (``P2:``, ``R0_rect:``, ``Tr_velo_to_cam:``)."""
    found = {}
    with open(path) as f:
        for line in f:
            if ":" not in line:
                continue
            key, _, rest = line.partition(":")
            key = key.strip()
            if key in _CALIB_KEYS:
                try:
                    found[key] = np.array([float(v) for v in rest.split()])
                except ValueError:
                    raise CalibFormatError(f"{path}: non-numeric value in {key}") from None
    mats = {}
    for key, shape in _CALIB_KEYS.items():
        if key not in found:
            raise CalibFormatError(f"{path}: missing calibration key {key}")
        if found[key].size != shape[0] * shape[1]:
            raise CalibFormatError(f"{path}: {key} needs {shape[0] * shape[1]} values, got {found[key].size}")
        mats[key] = found[key].reshape(shape)
    return Calibration(mats["P2"], mats["R0_rect"], mats["Tr_velo_to_cam"], image_width, image_height)


def write_calib(calib: Calibration, path: str | os.PathLike) -> None:
    rows = {"P2": calib.P, "R0_rect": calib.R[:3, :3], "Tr_velo_to_cam": calib.T[:3]}
    with open(path, "w") as f:
        for key, m in rows.items():
            f.write(f"{key}: " + " ".join(repr(float(v)) for v in np.ravel(m)) + "\n")
