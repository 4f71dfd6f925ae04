"""Grayscale image and kernel files.

Images are read from PGM/PNG (8- or 16-bit, colour converted to luminance)
or ``.npy`` and returned as float arrays in ``[0, 1]``. Written images are
16-bit and clamped to ``[0, 1]``. Kernels use a small text format: a header
line ``h w`` followed by ``h`` rows of ``w`` numbers.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)


class ImageFormatError(ValueError):
    pass


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".npy":
        arr = np.load(path)
        if arr.ndim != 2:
            raise ImageFormatError(f"{path}: expected a 2-D array, got shape {arr.shape}")
        return arr.astype(float)
    with Image.open(path) as im:
        if im.mode in ("RGB", "RGBA", "P", "LA", "CMYK", "YCbCr"):
            im = im.convert("L")
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise ImageFormatError(f"{path}: unsupported image layout {arr.shape}")
    if arr.dtype == np.uint8:
        return arr.astype(float) / 255.0
    if arr.dtype.kind in "ui":
        # 16-bit files come back as uint16 or int32 depending on the format
        return arr.astype(float) / 65535.0
    if arr.dtype.kind == "f":
        return arr.astype(float)
    raise ImageFormatError(f"{path}: unsupported pixel type {arr.dtype}")


def write_image(path, x, normalize=False):
    """Write a 16-bit grayscale PNG/PGM. ``normalize`` stretches min..max to the full range first."""
    x = np.asarray(x, float)
    if normalize:
        lo, hi = float(x.min()), float(x.max())
        x = (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)
    q = np.round(np.clip(x, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(q).save(Path(path))


def read_kernel(path) -> np.ndarray:
    lines = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines or len(lines[0]) != 2:
        raise ImageFormatError(f"{path}: first line must be 'h w'")
    h, w = (int(v) for v in lines[0])
    rows = lines[1:]
    if len(rows) != h or any(len(r) != w for r in rows):
        raise ImageFormatError(f"{path}: expected {h} rows of {w} values")
    k = np.array(rows, dtype=float)
    if not np.all(np.isfinite(k)):
        raise ImageFormatError(f"{path}: non-finite kernel taps")
    return k


def format_kernel(k) -> str:
    k = np.asarray(k, float)
    body = "\n".join(" ".join(f"{v:.17g}" for v in row) for row in k)
    return f"{k.shape[0]} {k.shape[1]}\n{body}\n"


def write_kernel(path, k):
    Path(path).write_text(format_kernel(k))
