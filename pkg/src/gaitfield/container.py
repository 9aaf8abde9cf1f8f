"""GFF tensor container plus feature/mask sequence ingestion.

GFF layout (little-endian)::

    0   4s  magic "GFF1"
    4   u32 L (frames)
    8   u32 h
    12  u32 w
    16  u32 c
    20  u8  dtype (0 = float32)
    21  3x  padding
    24  ... L*h*w*c values, raster order (frame, row, col, channel)

Masks may also arrive as concatenated binary PGM (P5) images.
"""

from __future__ import annotations

import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, NumericError

MAGIC = b"GFF1"
HEADER = struct.Struct("<4s4IB3x")
DTYPES = {0: np.dtype("<f4")}
MAX_ELEMENTS = 1 << 32


class BadMagicError(FormatError):
    pass


class DimensionOverflowError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class NonFinitePayloadError(FormatError):
    pass


def write_gff(path, data) -> None:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 3:
        data = data[..., None]
    if data.ndim != 4:
        raise ConfigError(f"GFF payload must be (L, h, w, c), got shape {data.shape}")
    out = data.astype("<f4")
    if not np.all(np.isfinite(out)):
        raise NumericError("payload is not finite in float32")
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, *data.shape, 0))
        fh.write(out.tobytes(order="C"))


def parse_gff(buf: bytes, name: str = "<buffer>") -> np.ndarray:
    if len(buf) < HEADER.size:
        raise TruncatedPayloadError(f"{name}: file shorter than the {HEADER.size}-byte header")
    magic, L, h, w, c, dtype = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"{name}: bad magic {magic!r}, expected {MAGIC!r}")
    if dtype not in DTYPES:
        raise FormatError(f"{name}: unsupported dtype code {dtype}")
    if min(L, h, w, c) == 0:
        raise FormatError(f"{name}: zero-sized dimension in header ({L}, {h}, {w}, {c})")
    count = L * h * w * c
    if count > MAX_ELEMENTS:
        raise DimensionOverflowError(f"{name}: header declares {count} elements (limit {MAX_ELEMENTS})")
    dt = DTYPES[dtype]
    need = count * dt.itemsize
    have = len(buf) - HEADER.size
    if have < need:
        raise TruncatedPayloadError(f"{name}: payload has {have} bytes, header requires {need}")
    if have > need:
        raise FormatError(f"{name}: {have - need} trailing bytes after payload")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=HEADER.size)
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr))[0])
        raise NonFinitePayloadError(f"{name}: non-finite value at element {bad}")
    return arr.reshape(L, h, w, c).astype(np.float64)


def read_gff(path) -> np.ndarray:
    """Load a GFF file as a float64 ``(L, h, w, c)`` array."""
    return parse_gff(Path(path).read_bytes(), str(path))


@dataclass
class FeatureSequence:
    """Per-frame dense features, stored as one ``(L, h, w, C_in)`` array."""

    frames: np.ndarray
    source_tag: str = ""
    timestep_tag: int | None = None
    frame_rate_hint: float | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise ConfigError(f"feature frames must be (L>=1, h, w, C), got {self.frames.shape}")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.frames.shape[1:]

    def frame(self, l: int) -> np.ndarray:
        return self.frames[l:l + 1]


@dataclass
class MaskSequence:
    """Binary silhouettes ``(L, h, w)`` at feature resolution."""

    frames: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3:
            raise ConfigError(f"mask frames must be (L, h, w), got {self.frames.shape}")
        if not np.all((self.frames == 0) | (self.frames == 1)):
            raise FormatError("mask values must be exactly 0 or 1")

    def __len__(self) -> int:
        return self.frames.shape[0]


def check_pair(seq: FeatureSequence, masks: MaskSequence) -> None:
    if len(seq) != len(masks):
        raise ConfigError(f"{len(seq)} feature frames but {len(masks)} mask frames")
    if seq.shape[:2] != masks.frames.shape[1:]:
        raise ConfigError(f"feature maps are {seq.shape[:2]}, masks are {masks.frames.shape[1:]}")


def save_feature_sequence(path, seq: FeatureSequence) -> None:
    write_gff(path, seq.frames)


def load_feature_sequence(path, source_tag: str | None = None,
                          timestep_tag: int | None = None) -> FeatureSequence:
    data = read_gff(path)
    tag = source_tag if source_tag is not None else Path(path).name
    return FeatureSequence(data, source_tag=tag, timestep_tag=timestep_tag)


_PGM_HEADER = re.compile(rb"P5(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)\s")


def parse_pgm_stack(buf: bytes, name: str = "<buffer>") -> np.ndarray:
    """Concatenated P5 images (maxval 255) -> ``(L, H, W)`` uint8 array."""
    frames = []
    pos = 0
    while pos < len(buf):
        if buf[pos:pos + 1].isspace():
            pos += 1
            continue
        m = _PGM_HEADER.match(buf, pos)
        if m is None:
            raise FormatError(f"{name}: malformed PGM header at byte {pos}")
        w, h, maxval = (int(g) for g in m.groups())
        if maxval != 255:
            raise FormatError(f"{name}: PGM maxval {maxval}, only 255 supported")
        start = m.end()
        end = start + w * h
        if end > len(buf):
            raise TruncatedPayloadError(f"{name}: PGM frame {len(frames)} truncated")
        frames.append(np.frombuffer(buf, np.uint8, w * h, start).reshape(h, w))
        pos = end
    if not frames:
        raise FormatError(f"{name}: no PGM frames")
    if len({f.shape for f in frames}) != 1:
        raise FormatError(f"{name}: PGM frames differ in size")
    return np.stack(frames)


def write_pgm_stack(path, masks) -> None:
    masks = np.asarray(masks)
    with open(path, "wb") as fh:
        for frame in masks:
            h, w = frame.shape
            fh.write(b"P5\n%d %d\n255\n" % (w, h))
            fh.write(np.where(frame > 0, 255, 0).astype(np.uint8).tobytes())


def block_majority(masks: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Downsample binary ``(L, H, W)`` masks by block vote; ties go to foreground."""
    L, H, W = masks.shape
    if H % target_h or W % target_w:
        raise ConfigError(f"mask size {H}x{W} is not an integer multiple of {target_h}x{target_w}")
    fh, fw = H // target_h, W // target_w
    votes = masks.reshape(L, target_h, fh, target_w, fw).sum(axis=(2, 4))
    return (2 * votes >= fh * fw).astype(np.float64)


def load_mask_sequence(path, target_h: int, target_w: int,
                       expected_frames: int | None = None) -> MaskSequence:
    buf = Path(path).read_bytes()
    if buf[:4] == MAGIC:
        data = parse_gff(buf, str(path))
        if data.shape[3] != 1:
            raise FormatError(f"{path}: mask GFF must have c=1, got {data.shape[3]}")
        raw = data[..., 0]
        if not np.all((raw == 0) | (raw == 1)):
            raise FormatError(f"{path}: mask values must be exactly 0 or 1")
    elif buf[:2] == b"P5":
        raw = (parse_pgm_stack(buf, str(path)) >= 128).astype(np.float64)
    else:
        raise BadMagicError(f"{path}: neither a GFF container nor a P5 graymap stack")
    if expected_frames is not None and raw.shape[0] != expected_frames:
        raise ConfigError(f"{path}: {raw.shape[0]} mask frames, features have {expected_frames}")
    out = block_majority(raw, target_h, target_w)
    return MaskSequence(out, meta={"source": os.fspath(path), "source_shape": raw.shape[1:]})
