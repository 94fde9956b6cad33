"""Grayscale image I/O and small raster helpers.

Images are 2-D ``uint8`` numpy arrays (row-major luminance).  Decoding of
PNG/PGM containers is delegated to Pillow; colour-to-luminance conversion is
done here so the rounding rule is explicit.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ImageTooSmall, UnreadableImage

MIN_SIDE = 32
LUMA = np.array([0.299, 0.587, 0.114])
IMAGE_SUFFIXES = (".png", ".pgm", ".ppm", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def to_luminance(rgb: np.ndarray) -> np.ndarray:
    """Y = 0.299 R + 0.587 G + 0.114 B, rounded half-up to uint8."""
    rgb = np.asarray(rgb, dtype=float)[..., :3]
    y = np.floor(rgb @ LUMA + 0.5)
    return np.clip(y, 0, 255).astype(np.uint8)


def load_image(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "L":
                arr = np.asarray(im, dtype=np.uint8)
            elif mode in ("I;16", "I"):
                arr = np.asarray(im).astype(np.int64)
                arr = np.clip(arr >> 8 if arr.max() > 255 else arr, 0, 255).astype(np.uint8)
            elif mode == "LA":
                arr = np.asarray(im.getchannel(0), dtype=np.uint8)
            else:
                arr = to_luminance(np.asarray(im.convert("RGB")))
    except FileNotFoundError as exc:
        raise UnreadableImage(path, "no such file") from exc
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise UnreadableImage(path, str(exc)) from exc
    return np.ascontiguousarray(arr)


def save_image(path, img: np.ndarray) -> None:
    """Write an 8-bit grayscale PNG or PGM (chosen by suffix)."""
    path = Path(path)
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise ValueError("expected a 2-D uint8 image")
    fmt = "PPM" if path.suffix.lower() in (".pgm", ".pnm") else "PNG"
    Image.fromarray(img, mode="L").save(path, format=fmt)


def check_image(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {img.shape}")
    h, w = img.shape
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ImageTooSmall(f"image {w}x{h} is smaller than {MIN_SIDE}x{MIN_SIDE}")
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return img


def thumbnail_signature(img: np.ndarray, size: int = 8) -> np.ndarray:
    """Mean-subtracted ``size x size`` block average, flattened (length 64 by default)."""
    img = np.asarray(img, dtype=float)
    h, w = img.shape
    ys = np.linspace(0, h, size + 1).round().astype(int)
    xs = np.linspace(0, w, size + 1).round().astype(int)
    # integral image gives exact block means for uneven block sizes
    ii = np.zeros((h + 1, w + 1))
    ii[1:, 1:] = img.cumsum(0).cumsum(1)
    s = ii[np.ix_(ys[1:], xs[1:])] - ii[np.ix_(ys[:-1], xs[1:])] - ii[np.ix_(ys[1:], xs[:-1])] + ii[np.ix_(ys[:-1], xs[:-1])]
    area = np.outer(np.diff(ys), np.diff(xs))
    sig = (s / area).ravel()
    return sig - sig.mean()
