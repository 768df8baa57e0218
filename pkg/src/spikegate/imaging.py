"""Binary PGM (P5) output for token-grid maps."""

from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np

from .errors import ValidationError


def encode_pgm(img: np.ndarray) -> bytes:
    """``uint8`` 2-D array -> P5 bytes (maxval 255, row-major)."""
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValidationError(f"PGM needs a 2-D uint8 array, got {img.dtype} {img.shape}")
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def decode_pgm(raw: bytes) -> np.ndarray:
    parts = raw.split(maxsplit=4)
    if len(parts) < 4 or parts[0] != b"P5" or parts[3] != b"255":
        raise ValidationError("not a P5 image with maxval 255")
    w, h = int(parts[1]), int(parts[2])
    body = raw[len(raw) - w * h:] if w * h else b""
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def to_gray(values: np.ndarray) -> np.ndarray:
    """Scale non-negative values so the maximum maps to 255; an all-zero map stays zero."""
    v = np.asarray(values, dtype=np.float64)
    if np.any(v < 0) or not np.all(np.isfinite(v)):
        raise ValidationError("map values must be finite and non-negative")
    top = v.max() if v.size else 0.0
    if top == 0:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.floor(v / top * 255.0 + 0.5).astype(np.uint8)


def write_pgm(path: Union[str, Path], img: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(img))
