"""Flow-style colour rendering of direction fields.

Hue follows the angle ``atan2(G1, G0)`` around an HSV wheel, saturation the
clipped magnitude, and value is always 1, so a zero vector is white.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError


@dataclass(frozen=True)
class FlowColorMap:
    max_magnitude: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.max_magnitude) or self.max_magnitude <= 0:
            raise ConfigError("max_magnitude must be a positive finite number")


def flow_hue(frame: np.ndarray) -> np.ndarray:
    """Hue in ``[0, 1)`` for each vector of an ``(h, w, 2)`` frame."""
    ang = np.arctan2(frame[..., 1], frame[..., 0])
    return np.mod(ang / (2 * np.pi), 1.0)


def flow_saturation(frame: np.ndarray, cmap: FlowColorMap) -> np.ndarray:
    mag = np.sqrt(np.sum(frame ** 2, axis=-1))
    return np.minimum(mag / cmap.max_magnitude, 1.0)


def hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Vectorised HSV to RGB with all channels in ``[0, 1]``."""
    h6 = np.mod(h, 1.0) * 6.0
    sector = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    table = np.stack([
        np.stack([v, t, p], -1), np.stack([q, v, p], -1), np.stack([p, v, t], -1),
        np.stack([p, q, v], -1), np.stack([t, p, v], -1), np.stack([v, p, q], -1),
    ])
    return np.take_along_axis(table, sector[None, ..., None], axis=0)[0]


def flow_color_encode(frame, cmap: FlowColorMap) -> np.ndarray:
    """``(h, w, 2)`` field frame to an ``(h, w, 3)`` uint8 image."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[-1] != 2:
        raise ConfigError(f"expected an (h, w, 2) field frame, got {frame.shape}")
    if not np.all(np.isfinite(frame)):
        raise ConfigError("field frame contains non-finite values")
    sat = flow_saturation(frame, cmap)
    rgb = hsv_to_rgb(flow_hue(frame), sat, np.ones_like(sat))
    return np.round(rgb * 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    image = np.ascontiguousarray(image, dtype=np.uint8)
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(image.tobytes())


_PPM_HEADER = re.compile(rb"P6\s+(\d+)\s+(\d+)\s+255\s")


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    m = _PPM_HEADER.match(buf)
    if m is None:
        raise FormatError(f"{path}: not an 8-bit binary PPM")
    w, h = int(m.group(1)), int(m.group(2))
    data = buf[m.end():]
    if len(data) != w * h * 3:
        raise FormatError(f"{path}: expected {w * h * 3} pixel bytes, found {len(data)}")
    return np.frombuffer(data, np.uint8).reshape(h, w, 3)


def write_image(path, image: np.ndarray) -> None:
    """PNG when the suffix is ``.png``, binary PPM otherwise."""
    if Path(path).suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8), "RGB").save(path, format="PNG")
    else:
        write_ppm(path, image)
