"""Binary PPM (P6) / PGM (P5) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError, ImageParseError

_WHITESPACE = b" \t\n\r\v\f"


def _header_fields(buf: bytes, count: int) -> tuple[list[int], int]:
    """Parse ``count`` integers after the magic, honouring comments; return them and the payload offset."""
    pos, fields = 2, []
    while len(fields) < count:
        if pos >= len(buf):
            raise ImageParseError("truncated header", pos)
        ch = buf[pos:pos + 1]
        if ch in (b"#",):
            end = buf.find(b"\n", pos)
            if end < 0:
                raise ImageParseError("unterminated comment", pos)
            pos = end + 1
        elif ch in _WHITESPACE:
            pos += 1
        elif ch.isdigit():
            start = pos
            while pos < len(buf) and buf[pos:pos + 1].isdigit():
                pos += 1
            fields.append(int(buf[start:pos]))
        else:
            raise ImageParseError(f"unexpected byte {ch!r} in header", pos)
    if pos >= len(buf) or buf[pos:pos + 1] not in _WHITESPACE:
        raise ImageParseError("missing whitespace after header", pos)
    return fields, pos + 1


def parse_pnm(buf: bytes, magic: bytes) -> tuple[np.ndarray, int]:
    if buf[:2] != magic:
        raise ImageParseError(f"expected magic {magic.decode()}, found {buf[:2]!r}", 0)
    (width, height, maxval), offset = _header_fields(buf, 3)
    if width < 1 or height < 1:
        raise ImageParseError("image extents must be positive", offset)
    if not 0 < maxval < 65536:
        raise ImageParseError(f"maxval {maxval} outside 1..65535", offset)
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * channels * dtype.itemsize
    if len(buf) - offset < need:
        raise ImageParseError(f"payload has {len(buf) - offset} bytes, need {need}", len(buf))
    pixels = np.frombuffer(buf, dtype=dtype, count=width * height * channels, offset=offset)
    return pixels.reshape(height, width, channels).astype(np.uint16 if maxval > 255 else np.uint8), maxval


def read_ppm(path) -> tuple[np.ndarray, int]:
    """``(pixels [H, W, 3], maxval)`` from a binary PPM file."""
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    return parse_pnm(buf, b"P6")


def write_ppm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w, _ = pixels.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes())


def write_pgm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    pixels, _ = parse_pnm(Path(path).read_bytes(), b"P5")
    return pixels[..., 0]
