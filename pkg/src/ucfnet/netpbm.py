"""Minimal 8-bit PGM/PPM reader and writer (P2, P3, P5, P6)."""
from __future__ import annotations

from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    """Malformed, truncated or unsupported netpbm data."""


_CHANNELS = {b"P2": 1, b"P5": 1, b"P3": 3, b"P6": 3}


def _tokens(data: bytes, count: int, pos: int):
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    out = []
    n = len(data)
    while len(out) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise NetpbmError("truncated header")
        if data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        out.append(data[start:pos])
    return out, pos


def decode(data: bytes) -> np.ndarray:
    magic = data[:2]
    if magic not in _CHANNELS:
        raise NetpbmError(f"unsupported magic {magic!r}")
    channels = _CHANNELS[magic]
    try:
        (w, h, maxval), pos = _tokens(data, 3, 2)
        width, height, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        if isinstance(exc, NetpbmError):
            raise
        raise NetpbmError(f"malformed header: {exc}") from None
    if width < 0 or height < 0:
        raise NetpbmError("negative image size")
    if maxval != 255:
        raise NetpbmError(f"unsupported maxval {maxval} (only 255 is supported)")
    count = width * height * channels
    if magic in (b"P5", b"P6"):
        # exactly one whitespace byte separates the header from the raster
        payload = data[pos + 1:pos + 1 + count]
        if len(payload) < count:
            raise NetpbmError(f"truncated payload: {len(payload)} of {count} bytes")
        values = np.frombuffer(payload, dtype=np.uint8)
    else:
        fields = data[pos:].split()
        if len(fields) < count:
            raise NetpbmError(f"truncated payload: {len(fields)} of {count} samples")
        try:
            values = np.array([int(v) for v in fields[:count]], dtype=np.int64)
        except ValueError:
            raise NetpbmError("non-numeric sample in ASCII payload") from None
        if (values < 0).any() or (values > maxval).any():
            raise NetpbmError("sample outside [0, maxval]")
        values = values.astype(np.uint8)
    shape = (height, width) if channels == 1 else (height, width, 3)
    return values.reshape(shape).copy()


def encode(raster, ascii: bool = False) -> bytes:
    arr = np.asarray(raster)
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.floating) or arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
            raise NetpbmError("raster must hold 8-bit integer samples")
        arr = arr.astype(np.uint8)
    if arr.ndim == 2:
        magic = b"P2" if ascii else b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P3" if ascii else b"P6"
    else:
        raise NetpbmError(f"unsupported raster shape {arr.shape}")
    header = magic + b"\n%d %d\n255\n" % (arr.shape[1], arr.shape[0])
    if not ascii:
        return header + arr.tobytes()
    rows = arr.reshape(arr.shape[0], -1)
    body = b"\n".join(b" ".join(b"%d" % v for v in row) for row in rows)
    return header + body + b"\n"


def read_image(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def write_image(path, raster, ascii: bool = False) -> None:
    Path(path).write_bytes(encode(raster, ascii))


def saliency_to_raster(sal) -> np.ndarray:
    """Map saliency values in [0, 1] to 8-bit samples ``round(255 * s)``."""
    return np.rint(np.clip(np.asarray(sal, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
