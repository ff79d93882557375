"""Binary PGM (P5) reading and writing.

Only the binary flavour is handled; 8-bit (maxval <= 255) and 16-bit
(big-endian, per the netpbm convention) samples round-trip bit for bit.
Malformed files raise PgmError carrying the byte offset of the problem.
"""

from __future__ import annotations

import numpy as np

__all__ = ["PgmError", "read_pgm", "write_pgm", "to_float", "from_float"]


class PgmError(ValueError):
    """Malformed PGM data; `offset` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _read_token(buf, pos):
    """Next whitespace-delimited token, skipping '#' comments to end of line."""
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise PgmError("unexpected end of header", start)
    return buf[start:pos], pos


def _read_int(buf, pos, what):
    tok, pos = _read_token(buf, pos)
    try:
        val = int(tok)
    except ValueError:
        raise PgmError(f"invalid {what} {tok!r}", pos - len(tok)) from None
    return val, pos


def read_pgm(path):
    """Read a binary PGM. Returns (samples, maxval); dtype uint8 or uint16."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 2:
        raise PgmError("file too short for a PGM magic number", 0)
    magic = buf[:2]
    if magic == b"P2":
        raise PgmError("ASCII PGM (P2) is not supported, expected binary P5", 0)
    if magic != b"P5":
        raise PgmError(f"bad magic {magic!r}, expected b'P5'", 0)
    pos = 2
    width, pos = _read_int(buf, pos, "width")
    height, pos = _read_int(buf, pos, "height")
    maxval, pos = _read_int(buf, pos, "maxval")
    if width < 1 or height < 1:
        raise PgmError(f"non-positive dimensions {width}x{height}", pos)
    if not 0 < maxval < 65536:
        raise PgmError(f"maxval {maxval} outside [1, 65535]", pos)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PgmError("missing single whitespace after maxval", pos)
    pos += 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    raster = buf[pos:pos + need]
    if len(raster) < need:
        raise PgmError(
            f"raster truncated: need {need} bytes, have {len(raster)}",
            pos + len(raster),
        )
    data = np.frombuffer(raster, dtype=dtype).reshape(height, width)
    data = data.astype(np.uint16 if maxval > 255 else np.uint8)
    if data.max(initial=0) > maxval:
        raise PgmError(f"sample value exceeds declared maxval {maxval}", pos)
    return data, maxval


def write_pgm(path, samples, maxval=None):
    """Write a binary PGM; dtype uint8 -> 8-bit, uint16 -> 16-bit big-endian."""
    arr = np.asarray(samples)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        default_max, out_dtype = 255, np.dtype("u1")
    elif arr.dtype == np.uint16:
        default_max, out_dtype = 65535, np.dtype(">u2")
    else:
        raise ValueError(f"samples must be uint8 or uint16, got {arr.dtype}")
    if maxval is None:
        maxval = default_max
    if not 0 < maxval <= default_max:
        raise ValueError(f"maxval {maxval} invalid for {arr.dtype}")
    if arr.max(initial=0) > maxval:
        raise ValueError(f"sample value exceeds maxval {maxval}")
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(arr.astype(out_dtype).tobytes())


def to_float(samples, maxval):
    """Integer samples -> float32 in [0, 1]."""
    return np.asarray(samples, dtype=np.float32) / float(maxval)


def from_float(frame, maxval=255):
    """Float frame in [0, 1] -> integer samples (uint8 or uint16)."""
    dtype = np.uint16 if maxval > 255 else np.uint8
    q = np.rint(np.clip(frame, 0.0, 1.0) * float(maxval))
    return q.astype(dtype)
