"""8-bit RGBA PNG encode/decode with deterministic byte output.

Encoding pins the compression level so identical float images always produce
identical files; service responses and CLI artifacts rely on that to be
byte-comparable.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image

from .core import InvalidParameterError

COMPRESS_LEVEL = 6


def to_rgba_u8(image) -> np.ndarray:
    """Clip a float (H, W, 3 or 4) image to [0, 1] and quantize to uint8 RGBA.

    A missing alpha channel becomes fully opaque.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] not in (3, 4):
        raise InvalidParameterError(
            f"image must have shape (H, W, 3) or (H, W, 4), got {arr.shape}")
    if arr.shape[2] == 3:
        arr = np.concatenate([arr, np.ones_like(arr[:, :, :1])], axis=2)
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_png(image) -> bytes:
    rgba = to_rgba_u8(image)
    buf = io.BytesIO()
    Image.fromarray(rgba, mode="RGBA").save(buf, format="PNG",
                                            compress_level=COMPRESS_LEVEL)
    return buf.getvalue()


def write_png(image, path) -> None:
    Path(path).write_bytes(encode_png(image))


def decode_png(data: bytes) -> np.ndarray:
    """PNG bytes to a float64 (H, W, 4) array in [0, 1]."""
    with Image.open(io.BytesIO(data)) as img:
        rgba = np.asarray(img.convert("RGBA"), dtype=np.float64)
    return rgba / 255.0


def read_png(path) -> np.ndarray:
    return decode_png(Path(path).read_bytes())
