"""Synthetic ultrasound-like dataset generator.

Images mimic B-mode scans at desk scale: a speckled mid-gray tissue field,
one to three high-contrast elliptical lesions (bright or dark, uniform per
image so the polarity doubles as a classification label), and a fan-shaped
field of view on every other image.  Ground-truth masks are exact by
construction and emitted as uncompressed RLE.
"""

from __future__ import annotations

import numpy as np

from .coco import CocoDataset, ImageRecord, InstanceAnnotation
from .rle import rle_encode, tight_bbox

__all__ = ["synth_generate", "CATEGORIES", "image_label"]

CATEGORIES = [(1, "bright_lesion"), (2, "dark_lesion")]

_TISSUE = 0.45
_BRIGHT = 0.88
_DARK = 0.08
_SPECKLE = 0.16
_MIN_LESION_PX = 24


def _field_of_view(size: int, fan: bool) -> np.ndarray:
    if not fan:
        return np.ones((size, size), dtype=bool)
    ys, xs = np.mgrid[0:size, 0:size]
    cy, cx = ys + 0.5, xs + 0.5
    apex_x, apex_y = size / 2.0, -0.18 * size
    dx, dy = cx - apex_x, cy - apex_y
    radius = np.hypot(dx, dy)
    angle = np.arctan2(dx, dy)  # 0 points straight down
    half_width = np.deg2rad(34.0)
    return (np.abs(angle) <= half_width) & (radius >= 0.28 * size) & (radius <= 1.22 * size)


def _ellipse_mask(size: int, cx: float, cy: float, ax: float, ay: float, theta: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size]
    px = xs + 0.5 - cx
    py = ys + 0.5 - cy
    ct, st = np.cos(theta), np.sin(theta)
    u = (px * ct + py * st) / ax
    v = (-px * st + py * ct) / ay
    return u * u + v * v <= 1.0


def _place_lesions(rng: np.random.Generator, size: int, fov: np.ndarray, count: int) -> list[np.ndarray]:
    masks: list[np.ndarray] = []
    occupied = np.zeros((size, size), dtype=bool)
    attempts = 0
    while len(masks) < count and attempts < 40:
        attempts += 1
        cx = rng.uniform(0.22 * size, 0.78 * size)
        cy = rng.uniform(0.30 * size, 0.80 * size)
        ax = rng.uniform(0.09 * size, 0.20 * size)
        ay = rng.uniform(0.09 * size, 0.20 * size)
        theta = rng.uniform(0.0, np.pi)
        mask = _ellipse_mask(size, cx, cy, ax, ay, theta) & fov
        if mask.sum() < _MIN_LESION_PX or (mask & occupied).any():
            continue
        occupied |= mask
        masks.append(mask)
    if not masks:
        # deterministic fallback so every image carries at least one instance
        mask = _ellipse_mask(size, 0.5 * size, 0.55 * size, 0.14 * size, 0.12 * size, 0.0) & fov
        masks.append(mask)
    return masks


def synth_generate(n_images: int, image_size: int, seed: int) -> CocoDataset:
    """Generate a deterministic synthetic dataset with exact RLE ground truth."""
    if n_images < 1:
        raise ValueError(f"synth_generate: n_images must be >= 1, got {n_images}")
    rng = np.random.default_rng(seed)
    ds = CocoDataset(categories=list(CATEGORIES))
    ann_id = 1
    for i in range(n_images):
        fan = i % 2 == 1
        fov = _field_of_view(image_size, fan)
        bright = bool(rng.random() < 0.5)
        n_lesions = int(rng.integers(1, 4))
        lesions = _place_lesions(rng, image_size, fov, n_lesions)

        img = np.full((image_size, image_size), _TISSUE, dtype=np.float32)
        # gentle depth attenuation, as in real scans
        img *= (1.0 - 0.25 * np.linspace(0.0, 1.0, image_size))[:, None].astype(np.float32)
        level = _BRIGHT if bright else _DARK
        for mask in lesions:
            img[mask] = level
        speckle = 1.0 + _SPECKLE * rng.standard_normal((image_size, image_size))
        img = np.clip(img * speckle, 0.0, 1.0).astype(np.float32)
        img[~fov] = 0.0

        image_id = i + 1
        ds.images.append(
            ImageRecord(
                id=image_id,
                file_name=f"images/synth_{i:05d}.png",
                width=image_size,
                height=image_size,
                pixels=img,
            )
        )
        category = 1 if bright else 2
        for mask in lesions:
            m = mask.astype(np.uint8)
            ds.annotations.append(
                InstanceAnnotation(
                    id=ann_id,
                    image_id=image_id,
                    category_id=category,
                    segmentation=rle_encode(m),
                    bbox=tight_bbox(m),
                    area=float(m.sum()),
                    iscrowd=0,
                )
            )
            ann_id += 1
    return ds


def image_label(ds: CocoDataset, image_id: int) -> int:
    """0-based class label of a synthetic image (0 bright, 1 dark)."""
    for a in ds.annotations:
        if a.image_id == image_id:
            return a.category_id - 1
    raise ValueError(f"image {image_id} has no annotations")
