"""8-bit image and mask I/O (PNG, PPM/PGM) and resizing."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

SUPPORTED_SUFFIXES = {".png", ".ppm", ".pgm", ".pnm"}


class ImageFormatError(ValueError):
    pass


def _open(path) -> Image.Image:
    path = Path(path)
    if path.suffix.lower() not in SUPPORTED_SUFFIXES:
        raise ImageFormatError(
            f"{path}: unsupported format {path.suffix!r}; convert to PNG or PPM/PGM first")
    try:
        img = Image.open(path)
        img.load()
    except OSError as exc:
        raise ImageFormatError(f"{path}: unreadable image ({exc})") from exc
    return img


def read_rgb(path) -> np.ndarray:
    """H x W x 3 float32 in [0, 1]."""
    return np.asarray(_open(path).convert("RGB"), dtype=np.float32) / 255.0


def read_mask(path) -> np.ndarray:
    """H x W uint8 in {0, 1}; gray values above 127 are positive."""
    gray = np.asarray(_open(path).convert("L"))
    return (gray > 127).astype(np.uint8)


def to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(arr, np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_rgb(path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image), mode="RGB").save(path)


def write_gray(path, arr: np.ndarray) -> None:
    """Save a [0, 1] map (or a 0/1 mask) as an 8-bit grayscale image."""
    Image.fromarray(to_uint8(arr), mode="L").save(path)


def _source_coords(n_out: int, n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # align_corners=False: pixel centres at i + 0.5
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, (src - lo).astype(np.float32)


def resize_bilinear(arr: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize of an H x W or H x W x C array (half-pixel centres)."""
    if width < 1 or height < 1:
        raise ValueError(f"target size must be >= 1, got {width}x{height}")
    arr = np.asarray(arr, np.float32)
    h, w = arr.shape[:2]
    if (h, w) == (height, width):
        return arr.copy()
    y0, y1, fy = _source_coords(height, h)
    x0, x1, fx = _source_coords(width, w)
    extra = (1,) * (arr.ndim - 2)
    fy = fy.reshape((-1, 1) + extra)
    rows = arr[y0] * (1 - fy) + arr[y1] * fy
    fx = fx.reshape((1, -1) + extra)
    return rows[:, x0] * (1 - fx) + rows[:, x1] * fx


def resize_nearest(arr: np.ndarray, width: int, height: int) -> np.ndarray:
    """Nearest-neighbour resize for masks."""
    if width < 1 or height < 1:
        raise ValueError(f"target size must be >= 1, got {width}x{height}")
    h, w = arr.shape[:2]
    ys = np.minimum(((np.arange(height) + 0.5) * (h / height)).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(width) + 0.5) * (w / width)).astype(np.int64), w - 1)
    return arr[ys][:, xs]


def size_for_width(h: int, w: int, width: int) -> tuple[int, int]:
    """(width, height) preserving aspect ratio."""
    return width, max(1, int(round(h * width / w)))
