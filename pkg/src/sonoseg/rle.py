"""Run-length mask codec over the COCO column-major pixel scan."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["Rle", "rle_encode", "rle_decode", "tight_bbox"]


@dataclass
class Rle:
    """Uncompressed COCO run-length encoding of a binary h×w mask.

    `counts` alternates run lengths starting with a zero-run; the leading
    element is 0 exactly when the column-major scan starts on foreground.
    """

    size: tuple[int, int]  # (height, width)
    counts: list[int] = field(default_factory=list)

    def validate(self) -> None:
        h, w = self.size
        if h <= 0 or w <= 0:
            raise ValueError(f"rle: non-positive size {self.size}")
        if any(c < 0 for c in self.counts):
            raise ValueError("rle: negative run length")
        if sum(self.counts) != h * w:
            raise ValueError(f"rle: counts sum {sum(self.counts)} != {h}*{w}")
        if 0 in self.counts[1:]:
            raise ValueError("rle: interior zero run (runs must be maximal)")

    def area(self) -> int:
        return sum(self.counts[1::2])

    def to_json(self) -> dict:
        return {"size": [int(self.size[0]), int(self.size[1])], "counts": [int(c) for c in self.counts]}


def rle_encode(mask: np.ndarray) -> Rle:
    """Encode a {0,1} mask; runs are counted down columns (column-major)."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"rle_encode: expected a 2-d mask, got shape {mask.shape}")
    h, w = mask.shape
    flat = (mask != 0).astype(np.uint8).reshape(-1, order="F")
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0] == 1:
        counts.insert(0, 0)
    return Rle(size=(h, w), counts=counts)


def rle_decode(r: Rle) -> np.ndarray:
    """Exact inverse of rle_encode; returns a uint8 {0,1} mask."""
    r.validate()
    h, w = r.size
    values = np.arange(len(r.counts), dtype=np.uint8) % 2
    flat = np.repeat(values, r.counts)
    return flat.reshape((h, w), order="F")


def tight_bbox(mask: np.ndarray) -> list[float]:
    """Minimal [x, y, w, h] box over foreground pixels, edges at pixel borders."""
    mask = np.asarray(mask)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("tight_bbox: empty mask")
    r0, r1 = int(rows[0]), int(rows[-1])
    c0, c1 = int(cols[0]), int(cols[-1])
    return [float(c0), float(r0), float(c1 - c0 + 1), float(r1 - r0 + 1)]
