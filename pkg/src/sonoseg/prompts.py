"""Prompt geometry: simulated training prompts and canonical evaluation prompts.

Coordinates are continuous image pixels; a pixel (r, c) has its center at
(x, y) = (c + 0.5, r + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Point",
    "Box",
    "Prompt",
    "distance_transform_l1",
    "center_point",
    "gt_box",
    "noise_box",
    "sample_training_prompt",
]


@dataclass(frozen=True)
class Point:
    x: float
    y: float


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def width(self) -> float:
        return self.x2 - self.x1

    def height(self) -> float:
        return self.y2 - self.y1


Prompt = Point | Box


def distance_transform_l1(mask: np.ndarray) -> np.ndarray:
    """City-block distance of each pixel to the nearest background pixel.

    Pixels outside the image count as background, so the transform is
    well defined even for all-foreground masks.  Two-pass sweep.
    """
    mask = np.asarray(mask) != 0
    h, w = mask.shape
    inf = h + w + 2
    dist = np.where(mask, inf, 0).astype(np.int64)
    ar = np.arange(w, dtype=np.int64)

    # horizontal distance within each row, including the side borders
    for r in range(h):
        row = dist[r]
        left = np.minimum.accumulate(row - ar) + ar
        right = (np.minimum.accumulate(row[::-1] - ar) + ar)[::-1]
        dist[r] = np.minimum(np.minimum(left, right), np.minimum(ar + 1, w - ar))
    # vertical min-convolution with |dr|, including the top/bottom borders
    rows = np.arange(h, dtype=np.int64)
    np.minimum(dist, np.minimum(rows + 1, h - rows)[:, None], out=dist)
    for r in range(1, h):
        np.minimum(dist[r], dist[r - 1] + 1, out=dist[r])
    for r in range(h - 2, -1, -1):
        np.minimum(dist[r], dist[r + 1] + 1, out=dist[r])
    return dist


def center_point(mask: np.ndarray) -> Point:
    """Interior representative point: argmax of the L1 distance transform.

    Ties break on the smallest row then smallest column, so the result is
    deterministic and always lies on foreground (unlike the bbox centroid,
    which can fall outside a concave mask).
    """
    mask = np.asarray(mask)
    if not mask.any():
        raise ValueError("center_point: empty mask")
    dist = distance_transform_l1(mask)
    flat = int(np.argmax(dist))  # first maximum = smallest row, then column
    r, c = divmod(flat, mask.shape[1])
    return Point(x=c + 0.5, y=r + 0.5)


def gt_box(mask: np.ndarray) -> Box:
    """Tight box of the mask in corner form."""
    mask = np.asarray(mask)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("gt_box: empty mask")
    return Box(x1=float(cols[0]), y1=float(rows[0]), x2=float(cols[-1] + 1), y2=float(rows[-1] + 1))


def noise_box(box: Box, image_w: float, image_h: float, rng: np.random.Generator, max_frac: float = 0.05) -> Box:
    """Displace each corner by up to `max_frac` of the box extent per axis.

    Draws are independent uniforms; the result is clamped to the image and
    reordered so the corner ordering invariant holds.
    """
    bw = box.width()
    bh = box.height()
    if bw <= 0 or bh <= 0:
        return box
    dx1, dx2 = rng.uniform(-max_frac * bw, max_frac * bw, size=2)
    dy1, dy2 = rng.uniform(-max_frac * bh, max_frac * bh, size=2)
    x1 = min(max(box.x1 + dx1, 0.0), image_w)
    x2 = min(max(box.x2 + dx2, 0.0), image_w)
    y1 = min(max(box.y1 + dy1, 0.0), image_h)
    y2 = min(max(box.y2 + dy2, 0.0), image_h)
    if x1 > x2:
        x1, x2 = x2, x1
    if y1 > y2:
        y1, y2 = y2, y1
    if x2 - x1 < 1e-6 or y2 - y1 < 1e-6:
        # clamping collapsed the box (only possible hard against a border)
        return Box(
            x1=min(max(box.x1, 0.0), image_w - 1e-3),
            y1=min(max(box.y1, 0.0), image_h - 1e-3),
            x2=min(max(box.x2, 1e-3), image_w),
            y2=min(max(box.y2, 1e-3), image_h),
        )
    return Box(x1=x1, y1=y1, x2=x2, y2=y2)


def sample_training_prompt(mask: np.ndarray, image_w: float, image_h: float, rng: np.random.Generator) -> Prompt:
    """Simulate a user prompt: point or box with equal probability.

    Points are uniform over foreground pixel centers; boxes are the noised
    ground-truth box.
    """
    mask = np.asarray(mask)
    if not mask.any():
        raise ValueError("sample_training_prompt: empty mask")
    if rng.random() < 0.5:
        rs, cs = np.nonzero(mask)
        k = int(rng.integers(rs.size))
        return Point(x=float(cs[k]) + 0.5, y=float(rs[k]) + 0.5)
    return noise_box(gt_box(mask), image_w, image_h, rng)
