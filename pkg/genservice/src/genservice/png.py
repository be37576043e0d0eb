"""Minimal PNG writer/reader for 8-bit RGB images.

The writer emits filter-0 scanlines so any decoder (including very small
ones) can read the output. The reader is just enough to verify protocol
conformance: signature, IHDR geometry, and an inflatable IDAT stream.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _chunk(kind: bytes, payload: bytes) -> bytes:
    return (struct.pack(">I", len(payload)) + kind + payload
            + struct.pack(">I", zlib.crc32(kind + payload) & 0xFFFFFFFF))


def encode_rgb(pixels: np.ndarray) -> bytes:
    """(H, W, 3) uint8 -> PNG bytes."""
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise ValueError(f"expected (H, W, 3) uint8, got {pixels.shape} {pixels.dtype}")
    h, w = pixels.shape[:2]
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    raw = b"".join(b"\x00" + pixels[row].tobytes() for row in range(h))
    return (SIGNATURE + _chunk(b"IHDR", ihdr)
            + _chunk(b"IDAT", zlib.compress(raw, 9)) + _chunk(b"IEND", b""))


def inspect(data: bytes) -> tuple[int, int]:
    """Validate a PNG byte stream; return (width, height).

    Raises ValueError on anything that is not a decodable 8-bit RGB PNG.
    """
    if data[:8] != SIGNATURE:
        raise ValueError("bad PNG signature")
    pos = 8
    width = height = None
    idat = b""
    while pos + 8 <= len(data):
        (length,), kind = struct.unpack(">I", data[pos:pos + 4]), data[pos + 4:pos + 8]
        payload = data[pos + 8:pos + 8 + length]
        if len(payload) != length:
            raise ValueError(f"truncated {kind!r} chunk")
        crc = struct.unpack(">I", data[pos + 8 + length:pos + 12 + length])[0]
        if crc != (zlib.crc32(kind + payload) & 0xFFFFFFFF):
            raise ValueError(f"bad CRC on {kind!r} chunk")
        if kind == b"IHDR":
            width, height = struct.unpack(">II", payload[:8])
        elif kind == b"IDAT":
            idat += payload
        elif kind == b"IEND":
            break
        pos += 12 + length
    if width is None:
        raise ValueError("missing IHDR")
    if not idat:
        raise ValueError("missing IDAT")
    zlib.decompress(idat)
    return int(width), int(height)
