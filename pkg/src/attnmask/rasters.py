"""PNG raster helpers shared by the dataset, affinity and CLI layers.

Masks are single-channel 8-bit PNGs holding class ids (255 = ignore).
Affinity masks reuse the exact same container with values {0, 1}.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ValidationError

IGNORE_LABEL = 255

# 256-entry palette in the usual bit-reversal scheme for segmentation
# labels, so mask PNGs open with visible colors in image viewers.


def _label_palette() -> list[int]:
    palette = []
    for label in range(256):
        r = g = b = 0
        value = label
        for shift in range(8):
            r |= ((value >> 0) & 1) << (7 - shift)
            g |= ((value >> 1) & 1) << (7 - shift)
            b |= ((value >> 2) & 1) << (7 - shift)
            value >>= 3
        palette.extend([r, g, b])
    return palette


LABEL_PALETTE = _label_palette()


def save_mask(mask: np.ndarray, path: str | os.PathLike, palette: bool = False) -> Path:
    """Write a (H, W) uint8 label mask as a single-channel PNG."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValidationError(f"mask must be 2-dimensional, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if not np.issubdtype(arr.dtype, np.integer) or arr.min() < 0 or arr.max() > 255:
            raise ValidationError("mask values must fit in uint8")
        arr = arr.astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = Image.fromarray(arr, mode="L")
    if palette:
        img = img.convert("P")
        img.putpalette(LABEL_PALETTE)
    img.save(path, format="PNG")
    return path


def load_mask(path: str | os.PathLike) -> np.ndarray:
    """Read a label mask PNG back as (H, W) uint8."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "P"):
                raise ValidationError(f"{path}: expected single-channel mask, got mode {img.mode!r}")
            arr = np.asarray(img, dtype=np.uint8)
    except ValidationError:
        raise
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ValidationError(f"{path}: unreadable mask raster ({exc})") from exc
    if arr.ndim != 2:
        raise ValidationError(f"{path}: mask raster is not single-channel")
    return arr


def load_binary_mask(path: str | os.PathLike) -> np.ndarray:
    """Read a mask PNG that must contain only values {0, 1}."""
    arr = load_mask(path)
    bad = np.setdiff1d(np.unique(arr), [0, 1])
    if bad.size:
        raise ValidationError(f"{path}: binary mask holds values outside {{0, 1}}: {bad.tolist()}")
    return arr


def save_image(image: np.ndarray, path: str | os.PathLike) -> Path:
    """Write a (H, W, 3) uint8 image as RGB PNG."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ValidationError(f"image must be (H, W, 3) uint8, got {arr.shape} {arr.dtype}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")
    return path


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read an image file as (H, W, 3) uint8 RGB."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise ValidationError(f"{path}: unreadable image ({exc})") from exc
