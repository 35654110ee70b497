"""Scanline polygon rasterization with the pixel-center membership rule."""

from __future__ import annotations

import math

import numpy as np

__all__ = ["polygon_to_mask"]


def _fill_single(poly: list[float], out: np.ndarray) -> None:
    n = len(poly) // 2
    xs = poly[0::2]
    ys = poly[1::2]
    h, w = out.shape
    ymin = max(0, int(math.floor(min(ys) - 0.5)))
    ymax = min(h - 1, int(math.ceil(max(ys))))
    for row in range(ymin, ymax + 1):
        yc = row + 0.5
        crossings = []
        for i in range(n):
            x0, y0 = xs[i], ys[i]
            x1, y1 = xs[(i + 1) % n], ys[(i + 1) % n]
            # half-open span so shared vertices are counted exactly once
            if (y0 <= yc < y1) or (y1 <= yc < y0):
                t = (yc - y0) / (y1 - y0)
                crossings.append(x0 + t * (x1 - x0))
        crossings.sort()
        for a, b in zip(crossings[0::2], crossings[1::2]):
            # pixel centers c+0.5 in [a, b)
            c_start = max(0, int(math.ceil(a - 0.5)))
            c_end = min(w - 1, int(math.ceil(b - 0.5)) - 1)
            if c_end >= c_start:
                out[row, c_start : c_end + 1] = 1


def polygon_to_mask(poly, h: int, w: int) -> np.ndarray:
    """Rasterize one polygon [x1,y1,x2,y2,...] or a union of several.

    A pixel (r, c) is foreground iff its center (c+0.5, r+0.5) lies inside
    the polygon under the even-odd rule.
    """
    polys = poly if poly and isinstance(poly[0], (list, tuple, np.ndarray)) else [poly]
    out = np.zeros((h, w), dtype=np.uint8)
    for p in polys:
        p = [float(v) for v in p]
        if len(p) < 6 or len(p) % 2:
            raise ValueError(f"polygon_to_mask: need at least 3 (x, y) vertices, got {len(p)} values")
        _fill_single(p, out)
    return out
