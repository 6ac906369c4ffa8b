"""Hand-built VLP-16 payloads shared by the tests."""

import struct

import numpy as np


def raw_packet(azimuths, distances, reflectivity=None, flags=None, timestamp=0):
    """Assemble 1206 bytes with struct, independently of the library encoder."""
    reflectivity = np.zeros((12, 32), dtype=int) if reflectivity is None else reflectivity
    flags = [b"\xff\xee"] * 12 if flags is None else flags
    out = bytearray()
    for b in range(12):
        out += flags[b] + struct.pack("<H", int(azimuths[b]))
        for r in range(32):
            out += struct.pack("<HB", int(distances[b][r]), int(reflectivity[b][r]))
    out += struct.pack("<I", timestamp) + b"\x37\x22"
    assert len(out) == 1206
    return bytes(out)


def sweep_packets(start=0, step=40, blocks=None, distance=2500):
    """Packets covering one or more sweeps; all returns at ``distance`` units."""
    blocks = blocks or 36000 // step
    az = (start + step * np.arange(blocks)) % 36000
    pad = (-len(az)) % 12
    az = np.concatenate([az, (az[-1] + step * np.arange(1, pad + 1)) % 36000])
    dist = np.full((12, 32), distance)
    return [raw_packet(az[i:i + 12], dist) for i in range(0, len(az), 12)]
