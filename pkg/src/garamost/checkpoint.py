"""Flat binary checkpoint container.

Layout: magic b"GMST1", then per parameter: name length (u32 LE), UTF-8 name,
rank (u32 LE), dims (u32 LE each), raw float32 little-endian payload.
Round-trips must be bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

__all__ = ["MAGIC", "CheckpointError", "save_checkpoint", "load_checkpoint"]

MAGIC = b"GMST1"


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


def save_checkpoint(path, params):
    """Write {name: array} to `path`. Arrays are stored as float32 LE."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        for name in sorted(params):
            # note: asarray with order="C" keeps 0-d arrays 0-d, unlike
            # ascontiguousarray which promotes them to 1-d
            arr = np.asarray(params[name], dtype="<f4", order="C")
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.tobytes())


def load_checkpoint(path):
    """Read a checkpoint back into {name: float32 array}."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad magic at offset 0: expected {MAGIC!r}")
    off = len(MAGIC)
    out = {}

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"truncated checkpoint: reading {what} at offset {off}")
        chunk = blob[off : off + n]
        off += n
        return chunk

    while off < len(blob):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"invalid UTF-8 name at offset {off - nlen}") from e
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims")) if rank else ()
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(4 * count, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    return out
