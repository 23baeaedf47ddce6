"""COBT1 checkpoint files: named float64 arrays in one little-endian blob.

    b"COBT1" | count u32
    count x ( name_len u32 | name utf-8 | ndim u32 | dims u32[ndim] | data f64[prod(dims)] )

A model checkpoint stores the backbone under ``backbone.*``, PEFT factors
under ``peft.*`` and coefficient sets / relation matrices / heads under
``cobot.*``; a JSON run description rides along as ``meta`` (utf-8 bytes
stored as a float64 vector of byte values).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"COBT1"


class CheckpointError(IOError):
    pass


def encode(arrays: dict) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict:
    if buf[:5] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {buf[:5]!r}")
    off = 5

    def take(n):
        nonlocal off
        if off + n > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {off}")
        chunk = buf[off : off + n]
        off += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if off != len(buf):
        raise CheckpointError(f"trailing bytes at {off}")
    return out


def save(path, arrays: dict, meta: dict | None = None) -> None:
    arrays = dict(arrays)
    if meta is not None:
        arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8).astype(np.float64)
    Path(path).write_bytes(encode(arrays))


def load(path) -> tuple:
    """Returns ``(arrays, meta)``; ``meta`` is ``{}`` when absent."""
    try:
        arrays = decode(Path(path).read_bytes())
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    meta = {}
    if "meta" in arrays:
        meta = json.loads(arrays.pop("meta").astype(np.uint8).tobytes().decode())
    return arrays, meta
