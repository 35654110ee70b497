"""Pixel-level helpers: grayscale IO, resizing, padding."""

from __future__ import annotations

import io

import numpy as np
from PIL import Image

__all__ = [
    "bilinear_resize",
    "nearest_resize",
    "pad_to_square",
    "resize_longest_extents",
    "to_grayscale",
    "decode_image_bytes",
    "load_image",
    "save_gray_png",
    "save_mask_png",
]

LUMA = (0.299, 0.587, 0.114)


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel-centre alignment (identity when sizes match)."""
    arr = np.asarray(arr, dtype=np.float32)
    h, w = arr.shape
    if (h, w) == (out_h, out_w):
        return arr.copy()
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = arr[np.ix_(y0, x0)] * (1 - wx) + arr[np.ix_(y0, x1)] * wx
    bot = arr[np.ix_(y1, x0)] * (1 - wx) + arr[np.ix_(y1, x1)] * wx
    return (top * (1 - wy) + bot * wy).astype(np.float32)


def nearest_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resample by source-cell centres (masks, labels)."""
    arr = np.asarray(arr)
    h, w = arr.shape
    if (h, w) == (out_h, out_w):
        return arr.copy()
    ys = np.minimum(((np.arange(out_h) + 0.5) * (h / out_h)).astype(int), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * (w / out_w)).astype(int), w - 1)
    return arr[np.ix_(ys, xs)]


def resize_longest_extents(h: int, w: int, target: int) -> tuple[int, int]:
    """New (h, w) with the longest side scaled to `target`, aspect preserved."""
    scale = target / max(h, w)
    return max(1, int(round(h * scale))), max(1, int(round(w * scale)))


def pad_to_square(arr: np.ndarray, size: int, fill: float = 0.0) -> np.ndarray:
    """Zero-pad on the bottom/right up to size×size."""
    h, w = arr.shape
    if h > size or w > size:
        raise ValueError(f"pad_to_square: input {h}x{w} exceeds target {size}")
    out = np.full((size, size), fill, dtype=arr.dtype)
    out[:h, :w] = arr
    return out


def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    """Luminance mix of an RGB float array."""
    return (LUMA[0] * rgb[..., 0] + LUMA[1] * rgb[..., 1] + LUMA[2] * rgb[..., 2]).astype(np.float32)


def _image_to_float(img: Image.Image) -> np.ndarray:
    if img.mode in ("RGB", "RGBA", "P"):
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        return to_grayscale(arr)
    if img.mode in ("L", "I;16", "I"):
        arr = np.asarray(img.convert("L"), dtype=np.float32)
        return (arr / 255.0).astype(np.float32)
    raise ValueError(f"unsupported image mode {img.mode!r}")


def decode_image_bytes(data: bytes) -> np.ndarray:
    """Decode PNG (or other PIL-readable) bytes to f32 grayscale in [0,1]."""
    img = Image.open(io.BytesIO(data))
    img.load()
    return _image_to_float(img)


def load_image(path) -> np.ndarray:
    with Image.open(path) as img:
        return _image_to_float(img)


def save_gray_png(path, pixels: np.ndarray) -> None:
    """Write f32 [0,1] pixels as 8-bit grayscale PNG."""
    arr = np.clip(np.round(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def save_mask_png(path, mask: np.ndarray) -> None:
    """Write a {0,1} mask as a 0/255 grayscale PNG."""
    arr = (np.asarray(mask) != 0).astype(np.uint8) * 255
    Image.fromarray(arr, mode="L").save(path, format="PNG")
