"""COCO-format dataset model: parsing, validation, deterministic writing.

Segmentations are carried either as uncompressed integer-array RLE
(column-major, see `rle`) or as pixel-coordinate polygons; both survive a
parse/write round trip unchanged.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .polygon import polygon_to_mask
from .rle import Rle, rle_decode

log = logging.getLogger(__name__)

__all__ = [
    "CocoError",
    "ImageRecord",
    "InstanceAnnotation",
    "CocoDataset",
    "parse_coco",
    "write_coco",
    "decode_segmentation",
    "validate_dataset",
]


class CocoError(ValueError):
    """Raised for any structural defect in a COCO document."""


@dataclass
class ImageRecord:
    id: int
    file_name: str
    width: int
    height: int
    source: str | None = None  # optional origin-dataset tag, used for stratified splits
    pixels: np.ndarray | None = field(default=None, compare=False, repr=False)

    def loaded(self) -> bool:
        return self.pixels is not None


@dataclass
class InstanceAnnotation:
    id: int
    image_id: int
    category_id: int
    segmentation: Rle | list  # Rle or list of polygons [[x1,y1,...], ...]
    bbox: list[float]  # [x, y, w, h] pixels
    area: float
    iscrowd: int = 0


@dataclass
class CocoDataset:
    images: list[ImageRecord] = field(default_factory=list)
    annotations: list[InstanceAnnotation] = field(default_factory=list)
    categories: list[tuple[int, str]] = field(default_factory=list)

    def image_by_id(self, image_id: int) -> ImageRecord:
        for im in self.images:
            if im.id == image_id:
                return im
        raise KeyError(image_id)

    def annotations_for(self, image_id: int) -> list[InstanceAnnotation]:
        return [a for a in self.annotations if a.image_id == image_id]


def decode_segmentation(ann: InstanceAnnotation, height: int, width: int) -> np.ndarray:
    """Decode an annotation's segmentation to a {0,1} uint8 mask."""
    if isinstance(ann.segmentation, Rle):
        return rle_decode(ann.segmentation)
    return polygon_to_mask(ann.segmentation, height, width)


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise CocoError(msg)


def _parse_segmentation(seg, ann_id) -> Rle | list:
    if isinstance(seg, dict):
        _require("size" in seg and "counts" in seg, f"annotation {ann_id}: RLE needs 'size' and 'counts'")
        size = seg["size"]
        _require(isinstance(size, list) and len(size) == 2, f"annotation {ann_id}: RLE size must be [h, w]")
        counts = seg["counts"]
        _require(isinstance(counts, list), f"annotation {ann_id}: RLE counts must be an integer array")
        r = Rle(size=(int(size[0]), int(size[1])), counts=[int(c) for c in counts])
        try:
            r.validate()
        except ValueError as e:
            raise CocoError(f"annotation {ann_id}: {e}") from None
        return r
    if isinstance(seg, list):
        _require(len(seg) > 0 and all(isinstance(p, list) for p in seg), f"annotation {ann_id}: polygon segmentation must be a list of coordinate lists")
        for p in seg:
            _require(len(p) >= 6 and len(p) % 2 == 0, f"annotation {ann_id}: polygon needs at least 3 (x, y) pairs")
        return [[float(v) for v in p] for p in seg]
    raise CocoError(f"annotation {ann_id}: unrecognized segmentation form")


def parse_coco(data: bytes | str) -> CocoDataset:
    """Parse and validate a COCO JSON document.

    Referential integrity (annotation -> image/category), id uniqueness,
    and in-bounds bboxes are enforced; each defect raises `CocoError`
    with a distinct diagnostic.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as e:
        raise CocoError(f"malformed JSON: {e}") from None
    _require(isinstance(doc, dict), "top level must be a JSON object")
    for key in ("images", "annotations", "categories"):
        _require(isinstance(doc.get(key), list), f"missing or non-array top-level key {key!r}")

    ds = CocoDataset()
    seen_img: set[int] = set()
    for rec in doc["images"]:
        img_id = int(rec["id"])
        _require(img_id not in seen_img, f"duplicate image id {img_id}")
        seen_img.add(img_id)
        w, h = int(rec["width"]), int(rec["height"])
        _require(w > 0 and h > 0, f"image {img_id}: non-positive extents {w}x{h}")
        ds.images.append(ImageRecord(id=img_id, file_name=str(rec["file_name"]), width=w, height=h, source=rec.get("source")))

    seen_cat: set[int] = set()
    for rec in doc["categories"]:
        cat_id = int(rec["id"])
        _require(cat_id not in seen_cat, f"duplicate category id {cat_id}")
        seen_cat.add(cat_id)
        ds.categories.append((cat_id, str(rec["name"])))

    img_dims = {im.id: (im.width, im.height) for im in ds.images}
    seen_ann: set[int] = set()
    for rec in doc["annotations"]:
        ann_id = int(rec["id"])
        _require(ann_id not in seen_ann, f"duplicate annotation id {ann_id}")
        seen_ann.add(ann_id)
        image_id = int(rec["image_id"])
        _require(image_id in img_dims, f"annotation {ann_id}: dangling image_id {image_id}")
        category_id = int(rec["category_id"])
        _require(category_id in seen_cat, f"annotation {ann_id}: dangling category_id {category_id}")
        bbox = [float(v) for v in rec["bbox"]]
        _require(len(bbox) == 4, f"annotation {ann_id}: bbox must have 4 entries")
        w, h = img_dims[image_id]
        x, y, bw, bh = bbox
        _require(bw >= 0 and bh >= 0, f"annotation {ann_id}: negative bbox extents")
        _require(x >= 0 and y >= 0 and x + bw <= w and y + bh <= h, f"annotation {ann_id}: bbox {bbox} outside image bounds {w}x{h}")
        seg = _parse_segmentation(rec["segmentation"], ann_id)
        if isinstance(seg, Rle):
            _require(seg.size == (img_dims[image_id][1], img_dims[image_id][0]), f"annotation {ann_id}: RLE size {seg.size} does not match image {image_id}")
        ds.annotations.append(
            InstanceAnnotation(
                id=ann_id,
                image_id=image_id,
                category_id=category_id,
                segmentation=seg,
                bbox=bbox,
                area=float(rec["area"]),
                iscrowd=int(rec.get("iscrowd", 0)),
            )
        )
    return ds


def _segmentation_json(seg) -> dict | list:
    if isinstance(seg, Rle):
        return seg.to_json()
    return [[float(v) for v in p] for p in seg]


def write_coco(ds: CocoDataset) -> bytes:
    """Serialize with fixed key order; identical datasets yield identical bytes."""
    doc = {
        "images": [
            _image_json(im)
            for im in ds.images
        ],
        "annotations": [
            {
                "id": a.id,
                "image_id": a.image_id,
                "category_id": a.category_id,
                "segmentation": _segmentation_json(a.segmentation),
                "bbox": [float(v) for v in a.bbox],
                "area": float(a.area),
                "iscrowd": a.iscrowd,
            }
            for a in ds.annotations
        ],
        "categories": [{"id": cid, "name": name} for cid, name in ds.categories],
    }
    return json.dumps(doc, separators=(",", ":")).encode("utf-8")


def _image_json(im: ImageRecord) -> dict:
    rec = {"id": im.id, "file_name": im.file_name, "width": im.width, "height": im.height}
    if im.source is not None:
        rec["source"] = im.source
    return rec


def validate_dataset(ds: CocoDataset, deep: bool = False) -> None:
    """Re-check dataset invariants; with deep=True also bbox/area vs decoded masks."""
    parse_coco(write_coco(ds))
    if not deep:
        return
    from .rle import tight_bbox

    dims = {im.id: (im.height, im.width) for im in ds.images}
    for a in ds.annotations:
        h, w = dims[a.image_id]
        mask = decode_segmentation(a, h, w)
        if not mask.any():
            raise CocoError(f"annotation {a.id}: empty mask")
        if tight_bbox(mask) != [float(v) for v in a.bbox]:
            raise CocoError(f"annotation {a.id}: bbox {a.bbox} is not the tight box {tight_bbox(mask)}")
        if float(mask.sum()) != float(a.area):
            raise CocoError(f"annotation {a.id}: area {a.area} != pixel count {int(mask.sum())}")
