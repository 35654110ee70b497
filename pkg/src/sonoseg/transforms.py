"""Dataset preprocessing: overlap removal, flips, longest-side resize, splits."""

from __future__ import annotations

import logging

import numpy as np

from .coco import CocoDataset, ImageRecord, InstanceAnnotation, decode_segmentation
from .imageops import bilinear_resize, nearest_resize, resize_longest_extents
from .rle import Rle, rle_decode, rle_encode

log = logging.getLogger(__name__)

__all__ = ["remove_overlap", "hflip", "resize_longest", "split_train_val"]


def remove_overlap(masks: list[np.ndarray]) -> list[np.ndarray]:
    """Make masks pairwise disjoint; contested pixels go to the earliest mask."""
    if not masks:
        return []
    shape = masks[0].shape
    for m in masks[1:]:
        if m.shape != shape:
            raise ValueError(f"remove_overlap: mask shapes differ: {shape} vs {m.shape}")
    claimed = np.zeros(shape, dtype=bool)
    out = []
    for m in masks:
        kept = (m != 0) & ~claimed
        claimed |= kept
        out.append(kept.astype(np.uint8))
    return out


def _flip_annotation(ann: InstanceAnnotation, width: int, height: int) -> InstanceAnnotation:
    x, y, bw, bh = ann.bbox
    bbox = [width - x - bw, y, bw, bh]
    if isinstance(ann.segmentation, Rle):
        seg: Rle | list = rle_encode(rle_decode(ann.segmentation)[:, ::-1])
    else:
        seg = [[(width - v) if i % 2 == 0 else v for i, v in enumerate(p)] for p in ann.segmentation]
    return InstanceAnnotation(id=ann.id, image_id=ann.image_id, category_id=ann.category_id, segmentation=seg, bbox=bbox, area=ann.area, iscrowd=ann.iscrowd)


def hflip(image: ImageRecord, annotations: list[InstanceAnnotation]) -> tuple[ImageRecord, list[InstanceAnnotation]]:
    """Mirror an image and its annotations about the vertical axis."""
    pixels = image.pixels[:, ::-1].copy() if image.pixels is not None else None
    flipped = ImageRecord(id=image.id, file_name=image.file_name, width=image.width, height=image.height, source=image.source, pixels=pixels)
    return flipped, [_flip_annotation(a, image.width, image.height) for a in annotations]


def resize_longest(image: ImageRecord, annotations: list[InstanceAnnotation], target: int) -> tuple[ImageRecord, list[InstanceAnnotation]]:
    """Aspect-preserving resize so the longest side equals `target`.

    Image pixels are resampled bilinearly, masks nearest-neighbour; boxes and
    polygons are scaled by the same factor.  Padding to a square model input
    is a separate step (`imageops.pad_to_square`).
    """
    if target <= 0:
        raise ValueError(f"resize_longest: target must be positive, got {target}")
    new_h, new_w = resize_longest_extents(image.height, image.width, target)
    sx = new_w / image.width
    sy = new_h / image.height
    pixels = bilinear_resize(image.pixels, new_h, new_w) if image.pixels is not None else None
    resized = ImageRecord(id=image.id, file_name=image.file_name, width=new_w, height=new_h, source=image.source, pixels=pixels)
    out_anns = []
    for a in annotations:
        x, y, bw, bh = a.bbox
        bbox = [x * sx, y * sy, bw * sx, bh * sy]
        if isinstance(a.segmentation, Rle):
            mask = decode_segmentation(a, image.height, image.width)
            seg: Rle | list = rle_encode(nearest_resize(mask, new_h, new_w))
        else:
            seg = [[v * sx if i % 2 == 0 else v * sy for i, v in enumerate(p)] for p in a.segmentation]
        out_anns.append(InstanceAnnotation(id=a.id, image_id=a.image_id, category_id=a.category_id, segmentation=seg, bbox=bbox, area=a.area * sx * sy, iscrowd=a.iscrowd))
    return resized, out_anns


def split_train_val(ds: CocoDataset, val_fraction: float = 0.05, seed: int = 0) -> tuple[CocoDataset, CocoDataset]:
    """Deterministic image-level split, stratified by `ImageRecord.source` tags."""
    if not 0 < val_fraction < 1:
        raise ValueError(f"split_train_val: val_fraction must be in (0,1), got {val_fraction}")
    rng = np.random.default_rng(seed)
    groups: dict[str | None, list[ImageRecord]] = {}
    for im in ds.images:
        groups.setdefault(im.source, []).append(im)

    val_ids: set[int] = set()
    for key in sorted(groups, key=lambda k: (k is None, k)):
        members = groups[key]
        order = rng.permutation(len(members))
        n_val = int(len(members) * val_fraction + 0.5)
        for idx in order[:n_val]:
            val_ids.add(members[idx].id)
    if not val_ids:
        log.warning("split_train_val: validation split is empty (%d images at fraction %.3f)", len(ds.images), val_fraction)

    def subset(keep: set[int]) -> CocoDataset:
        return CocoDataset(
            images=[im for im in ds.images if im.id in keep],
            annotations=[a for a in ds.annotations if a.image_id in keep],
            categories=list(ds.categories),
        )

    train_ids = {im.id for im in ds.images} - val_ids
    return subset(train_ids), subset(val_ids)
