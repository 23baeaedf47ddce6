"""Deterministic synthetic binary-segmentation datasets and the CSYN1 file format.

Every sample is drawn from its own Philox stream keyed by
``(seed, domain, sample index)``, so generation order does not matter.

File layout (little-endian)::

    header  16 B   b"CSYN1" | version u8 | image_size u16 | count u32 | reserved 4 B
    record         image f32[s*s] | mask packbits(s*s) | box i16[4] (x0 y0 x1 y1) | crc32 u32

The CRC covers the record bytes preceding it.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"CSYN1"
VERSION = 1
HEADER = struct.Struct("<5sBHI4s")
DOMAINS = ("source", "target-shapes", "target-texture", "target-inverted")
_DOMAIN_CODE = {d: i for i, d in enumerate(DOMAINS)}
MAX_RETRIES = 100


class DatasetFormatError(IOError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class GeometryError(RuntimeError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    domain: str = "source"
    count: int = 200
    image_size: int = 64
    seed: int = 0
    noise: float = 0.1

    def __post_init__(self):
        if self.domain not in _DOMAIN_CODE:
            raise ValueError(f"unknown domain {self.domain!r}; expected one of {DOMAINS}")
        if self.count < 1:
            raise ValueError("sample count must be >= 1")
        if not 0.0 <= self.noise <= 0.5:
            raise ValueError("noise level must lie in [0, 0.5]")
        if self.image_size < 8 or self.image_size > 32767:
            raise ValueError("image_size must be in [8, 32767]")


@dataclass
class SampleRecord:
    image: np.ndarray  # (s, s) float64 in [0, 1]
    mask: np.ndarray  # (s, s) bool
    box: tuple  # (x0, y0, x1, y1), inclusive pixel coordinates

    def __eq__(self, other):
        if not isinstance(other, SampleRecord):
            return NotImplemented
        return (
            np.array_equal(self.image, other.image)
            and np.array_equal(self.mask, other.mask)
            and tuple(self.box) == tuple(other.box)
        )


def tight_box(mask: np.ndarray) -> tuple:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise GeometryError("empty mask has no bounding box")
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def sample_rng(seed: int, domain: str, index: int) -> np.random.Generator:
    key = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, _DOMAIN_CODE[domain], int(index)])
    return np.random.Generator(np.random.Philox(key))


def _ellipse(rng, s, yy, xx, lo=7.0, hi=18.0):
    a, b = rng.uniform(lo, hi, size=2) * (s / 64.0)
    theta = rng.uniform(0, np.pi)
    cy, cx = rng.uniform(0.18 * s, 0.82 * s, size=2)
    c, sn = np.cos(theta), np.sin(theta)
    u = (xx - cx) * c + (yy - cy) * sn
    v = -(xx - cx) * sn + (yy - cy) * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _ring(rng, s, yy, xx):
    r_out = rng.uniform(9.0, 18.0) * (s / 64.0)
    r_in = r_out * rng.uniform(0.4, 0.65)
    cy, cx = rng.uniform(0.25 * s, 0.75 * s, size=2)
    d = np.hypot(yy - cy, xx - cx)
    return (d <= r_out) & (d >= r_in)


def _rectangle(rng, s, yy, xx):
    h, w = rng.uniform(10.0, 30.0, size=2) * (s / 64.0)
    cy, cx = rng.uniform(0.25 * s, 0.75 * s, size=2)
    return (np.abs(yy - cy) <= h / 2) & (np.abs(xx - cx) <= w / 2)


def _draw(spec: DatasetSpec, index: int) -> SampleRecord:
    s = spec.image_size
    rng = sample_rng(spec.seed, spec.domain, index)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    for _ in range(MAX_RETRIES):
        if spec.domain == "target-shapes":
            mask = _ring(rng, s, yy, xx) if rng.uniform() < 0.5 else _rectangle(rng, s, yy, xx)
        else:
            mask = _ellipse(rng, s, yy, xx)
        frac = mask.mean()
        # reject shapes clipped by the border or too small to carry a box
        if frac > 0 and not (mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any()):
            break
    else:
        raise GeometryError(f"could not draw a valid shape for sample {index} after {MAX_RETRIES} tries")
    fg = rng.uniform(0.6, 0.9)
    bg = rng.uniform(0.1, 0.35)
    sigma = spec.noise
    if spec.domain == "target-texture":
        sigma = min(0.5, spec.noise + 0.25)
    image = np.where(mask, fg, bg) + sigma * rng.standard_normal((s, s))
    image = np.clip(image, 0.0, 1.0)
    if spec.domain == "target-inverted":
        image = 1.0 - image
    # storage is f32; quantize here so in-memory and on-disk records agree exactly
    image = image.astype(np.float32).astype(np.float64)
    return SampleRecord(image, mask, tight_box(mask))


def generate(spec: DatasetSpec) -> list:
    return [_draw(spec, i) for i in range(spec.count)]


def record_size(image_size: int) -> int:
    n = image_size * image_size
    return 4 * n + (n + 7) // 8 + 8 + 4


def file_size(image_size: int, count: int) -> int:
    return HEADER.size + count * record_size(image_size)


def encode(records: list) -> bytes:
    if not records:
        raise ValueError("cannot write an empty dataset")
    s = records[0].image.shape[0]
    parts = [HEADER.pack(MAGIC, VERSION, s, len(records), b"\0" * 4)]
    for r in records:
        if r.image.shape != (s, s) or r.mask.shape != (s, s):
            raise ValueError("all records must share one image size")
        body = (
            r.image.astype("<f4").tobytes()
            + np.packbits(r.mask.astype(bool).reshape(-1)).tobytes()
            + struct.pack("<4h", *r.box)
        )
        parts.append(body + struct.pack("<I", zlib.crc32(body)))
    return b"".join(parts)


def decode(buf: bytes) -> list:
    if len(buf) < HEADER.size:
        raise DatasetFormatError("truncated header", len(buf))
    magic, version, s, count, _ = HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 5)
    n = s * s
    rsize = record_size(s)
    mask_bytes = (n + 7) // 8
    out = []
    off = HEADER.size
    for i in range(count):
        if off + rsize > len(buf):
            raise DatasetFormatError(f"truncated record {i}", off)
        body = buf[off : off + rsize - 4]
        (crc,) = struct.unpack_from("<I", buf, off + rsize - 4)
        if zlib.crc32(body) != crc:
            raise DatasetFormatError(f"checksum mismatch in record {i}", off)
        image = np.frombuffer(body, dtype="<f4", count=n).reshape(s, s).astype(np.float64)
        bits = np.frombuffer(body, dtype=np.uint8, count=mask_bytes, offset=4 * n)
        mask = np.unpackbits(bits)[:n].reshape(s, s).astype(bool)
        box = struct.unpack_from("<4h", body, 4 * n + mask_bytes)
        out.append(SampleRecord(image, mask, tuple(int(v) for v in box)))
        off += rsize
    if off != len(buf):
        raise DatasetFormatError("trailing bytes after last record", off)
    return out


def write_dataset(records: list, path) -> None:
    Path(path).write_bytes(encode(records))


def read_dataset(path) -> list:
    return decode(Path(path).read_bytes())


def stack(records: list):
    """Arrays ``(images (B,s,s), masks (B,s,s) float, boxes (B,4) int)`` for a batch."""
    images = np.stack([r.image for r in records])
    masks = np.stack([r.mask for r in records]).astype(np.float64)
    boxes = np.array([r.box for r in records], dtype=np.int64)
    return images, masks, boxes
