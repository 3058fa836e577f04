"""Binary netpbm (P5 gray / P6 color) reading and writing.

Only maxval 255 is supported; that is what the dataset generator and the
heatmap exporter produce.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    """Malformed or unsupported netpbm file."""


def _read_header_tokens(data: bytes, count: int):
    """First ``count`` whitespace-separated tokens, skipping '#' comments.

    Returns the tokens and the offset one byte past the whitespace
    character that terminates the last token (start of raster data).
    """
    tokens = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise NetpbmError("truncated header")
        c = data[i : i + 1]
        if c == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
            i += 1
        elif c.isspace():
            i += 1
        else:
            start = i
            while i < len(data) and not data[i : i + 1].isspace() and data[i : i + 1] != b"#":
                i += 1
            tokens.append(data[start:i])
    if i >= len(data) or not data[i : i + 1].isspace():
        raise NetpbmError("missing whitespace after header")
    return tokens, i + 1


def read_netpbm(path) -> np.ndarray:
    """Read a binary P5/P6 file as a uint8 array: (h, w) gray or (3, h, w) color."""
    data = Path(path).read_bytes()
    if data[:2] not in (b"P5", b"P6"):
        raise NetpbmError(f"{path}: not a binary P5/P6 file")
    channels = 1 if data[:2] == b"P5" else 3
    tokens, offset = _read_header_tokens(data, 4)
    try:
        width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise NetpbmError(f"{path}: bad header") from exc
    if maxval != 255:
        raise NetpbmError(f"{path}: unsupported maxval {maxval}")
    expected = width * height * channels
    raster = data[offset : offset + expected]
    if len(raster) != expected:
        raise NetpbmError(f"{path}: expected {expected} raster bytes, got {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8)
    if channels == 1:
        return arr.reshape(height, width)
    return arr.reshape(height, width, 3).transpose(2, 0, 1).copy()


def write_ppm(path, image: np.ndarray) -> None:
    """Write a (3, h, w) uint8 array as binary P6."""
    if image.ndim != 3 or image.shape[0] != 3 or image.dtype != np.uint8:
        raise NetpbmError(f"write_ppm expects (3, h, w) uint8, got {image.shape} {image.dtype}")
    _, h, w = image.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(image.transpose(1, 2, 0).tobytes())


def write_pgm(path, image: np.ndarray) -> None:
    """Write an (h, w) uint8 array as binary P5."""
    if image.ndim != 2 or image.dtype != np.uint8:
        raise NetpbmError(f"write_pgm expects (h, w) uint8, got {image.shape} {image.dtype}")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(image.tobytes())
