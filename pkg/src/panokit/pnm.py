"""Binary netpbm I/O: PPM (P6) colour and PGM (P5) grey, 8- or 16-bit.

Samples wider than 8 bits are big-endian, as the netpbm format requires.
Reads and writes are bit-exact round trips.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np


class PnmError(ValueError):
    pass


def _read_header(buf: bytes, magic: bytes):
    if buf[:2] != magic:
        raise PnmError(f"expected {magic.decode()} magic, got {buf[:2]!r}")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise PnmError("truncated or malformed header")
        fields.append(int(buf[start:pos]))
    # exactly one whitespace byte separates the header from the raster
    pos += 1
    width, height, maxval = fields
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise PnmError(f"bad header values {width}x{height} maxval {maxval}")
    return width, height, maxval, pos


def _decode(path, magic: bytes, channels: int) -> tuple[np.ndarray, int]:
    buf = Path(path).read_bytes()
    width, height, maxval, pos = _read_header(buf, magic)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    n = width * height * channels
    if len(buf) - pos < n * dtype.itemsize:
        raise PnmError(f"{path}: raster truncated")
    raw = np.frombuffer(buf, dtype=dtype, count=n, offset=pos)
    shape = (height, width, channels) if channels > 1 else (height, width)
    arr = raw.reshape(shape)
    arr = arr.astype(np.uint16) if maxval > 255 else arr.copy()
    return arr, maxval


def _encode(path, magic: bytes, arr: np.ndarray, maxval: int) -> None:
    height, width = arr.shape[:2]
    header = b"%s\n%d %d\n%d\n" % (magic, width, height, maxval)
    raster = arr.astype(">u2" if maxval > 255 else np.uint8).tobytes()
    Path(path).write_bytes(header + raster)


def read_ppm(path) -> np.ndarray:
    """Return an ``(height, width, 3)`` uint8 array."""
    arr, maxval = _decode(path, b"P6", 3)
    if maxval > 255:
        raise PnmError(f"{path}: only 8-bit PPM is supported, maxval {maxval}")
    return arr


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise PnmError(f"PPM needs an (h, w, 3) uint8 array, got {rgb.shape} {rgb.dtype}")
    _encode(path, b"P6", rgb, 255)


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Return ``(grey, maxval)``; ``grey`` is uint8 or uint16 depending on maxval."""
    return _decode(path, b"P5", 1)


def write_pgm(path, grey: np.ndarray, maxval: int | None = None) -> None:
    grey = np.asarray(grey)
    if grey.ndim != 2 or grey.dtype not in (np.uint8, np.uint16):
        raise PnmError(f"PGM needs a 2-D uint8/uint16 array, got {grey.shape} {grey.dtype}")
    if maxval is None:
        maxval = 255 if grey.dtype == np.uint8 else 65535
    if grey.size and int(grey.max()) > maxval:
        raise PnmError(f"sample {int(grey.max())} exceeds maxval {maxval}")
    _encode(path, b"P5", grey, maxval)
