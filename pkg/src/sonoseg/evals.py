"""COCO-style mAP over IoU thresholds plus macro classification metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .coco import CocoDataset, decode_segmentation
from .prompts import center_point, gt_box
from .rle import Rle, rle_decode, rle_encode

log = logging.getLogger(__name__)

__all__ = [
    "COCO_THRESHOLDS",
    "Detection",
    "EvalReport",
    "iou",
    "coco_map",
    "prompt_eval",
    "classification_metrics",
    "ClassificationReport",
]

COCO_THRESHOLDS = tuple((50 + 5 * i) / 100 for i in range(10))


@dataclass
class Detection:
    image_id: int
    category_id: int
    score: float
    mask: Rle | None = None
    box: tuple[float, float, float, float] | None = None  # corner form


@dataclass
class EvalReport:
    map: float
    map50: float
    per_threshold_ap: dict[float, float]
    counts: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"map": self.map, "map50": self.map50}


def _mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = int(np.logical_and(a, b).sum())
    union = int(np.logical_or(a, b).sum())
    return inter / union if union else 0.0


def _box_iou(a, b) -> float:
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def iou(a, b) -> float:
    """IoU of two masks (arrays of equal shape) or two corner-form boxes."""
    a_is_mask = isinstance(a, np.ndarray) and np.asarray(a).ndim == 2
    b_is_mask = isinstance(b, np.ndarray) and np.asarray(b).ndim == 2
    if a_is_mask != b_is_mask:
        raise ValueError("iou: operands must both be masks or both be boxes")
    if a_is_mask:
        a, b = np.asarray(a), np.asarray(b)
        if a.shape != b.shape:
            raise ValueError(f"iou: mask shapes differ: {a.shape} vs {b.shape}")
        return _mask_iou(a != 0, b != 0)
    if len(a) != 4 or len(b) != 4:
        raise ValueError("iou: boxes must be 4-tuples (x1, y1, x2, y2)")
    return _box_iou(a, b)


def _interp101_ap(recalls: np.ndarray, precisions: np.ndarray) -> float:
    """101-point interpolated average precision from raw PR points."""
    if recalls.size == 0:
        return 0.0
    # precision envelope: best precision at recall >= r
    env = np.maximum.accumulate(precisions[::-1])[::-1]
    grid = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recalls, grid, side="left")
    vals = np.where(idx < recalls.size, env[np.minimum(idx, recalls.size - 1)], 0.0)
    return float(vals.mean())


def coco_map(detections: list[Detection], ground_truths, thresholds=COCO_THRESHOLDS, kind: str = "mask") -> EvalReport:
    """Greedy-matching COCO mAP, mean over categories present in the ground truth.

    Detections are ranked globally by descending score (ties keep insertion
    order); each matches at most one unmatched GT of its image and category,
    choosing the highest IoU at or above the threshold.
    """
    if kind not in ("mask", "box"):
        raise ValueError(f"coco_map: kind must be 'mask' or 'box', got {kind!r}")

    def gt_payload(g):
        if kind == "mask":
            seg = g.segmentation if isinstance(g.segmentation, Rle) else None
            if seg is None:
                raise ValueError("coco_map: mask evaluation requires RLE ground truth")
            return rle_decode(seg).astype(bool)
        x, y, w, h = g.bbox
        return (x, y, x + w, y + h)

    def det_payload(d: Detection):
        if kind == "mask":
            if d.mask is None:
                raise ValueError("coco_map: mask evaluation requires detection masks")
            return rle_decode(d.mask).astype(bool)
        if d.box is None:
            raise ValueError("coco_map: box evaluation requires detection boxes")
        return d.box

    pair_iou = _mask_iou if kind == "mask" else _box_iou

    categories = sorted({g.category_id for g in ground_truths})
    per_threshold: dict[float, list[float]] = {t: [] for t in thresholds}
    matched50 = unmatched_det50 = 0
    for cat in categories:
        gts = [g for g in ground_truths if g.category_id == cat]
        dets = [d for d in detections if d.category_id == cat]
        order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
        dets = [dets[i] for i in order]
        gt_data = [gt_payload(g) for g in gts]
        det_data = [det_payload(d) for d in dets]
        # IoU against every GT of the same image, computed once
        iou_table = np.zeros((len(dets), len(gts)))
        for i, d in enumerate(dets):
            for j, g in enumerate(gts):
                if g.image_id == d.image_id:
                    iou_table[i, j] = pair_iou(det_data[i], gt_data[j])

        n_gt = len(gts)
        for t in thresholds:
            taken = np.zeros(n_gt, dtype=bool)
            tp = np.zeros(len(dets))
            for i in range(len(dets)):
                best_j, best_iou = -1, t
                for j in range(n_gt):
                    if not taken[j] and gts[j].image_id == dets[i].image_id and iou_table[i, j] >= best_iou:
                        if iou_table[i, j] > best_iou or best_j == -1:
                            best_j, best_iou = j, iou_table[i, j]
                if best_j >= 0:
                    taken[best_j] = True
                    tp[i] = 1.0
            cum_tp = np.cumsum(tp)
            recalls = cum_tp / n_gt
            precisions = cum_tp / np.arange(1, len(dets) + 1)
            per_threshold[t].append(_interp101_ap(recalls, precisions))
            if t == 0.5:
                matched50 += int(tp.sum())
                unmatched_det50 += int(len(dets) - tp.sum())

    per_threshold_ap = {t: float(np.mean(aps)) if aps else 0.0 for t, aps in per_threshold.items()}
    mean_ap = float(np.mean(list(per_threshold_ap.values()))) if per_threshold_ap else 0.0
    total_gt = len(list(ground_truths))
    return EvalReport(
        map=mean_ap,
        map50=per_threshold_ap.get(0.5, 0.0),
        per_threshold_ap=per_threshold_ap,
        counts={"matched": matched50, "unmatched_detections": unmatched_det50, "unmatched_ground_truths": total_gt - matched50},
    )


def prompt_eval(model, dataset: CocoDataset, prompt_mode: str, refine_steps: int = 1, data_root: Path | None = None) -> EvalReport:
    """Prompt every ground-truth instance and score the predictions with coco_map.

    Each instance yields exactly one detection whose score is the model's
    predicted IoU for the selected mask.
    """
    if prompt_mode not in ("center_point", "gt_box"):
        raise ValueError(f"prompt_eval: unknown prompt mode {prompt_mode!r}")
    from .train import load_pixels

    detections = []
    for im in dataset.images:
        anns = dataset.annotations_for(im.id)
        if not anns:
            continue
        pixels = load_pixels(dataset, im, data_root)
        for a in anns:
            mask = decode_segmentation(a, im.height, im.width)
            if not mask.any():
                log.warning("prompt_eval: skipping empty instance %d", a.id)
                continue
            prompt = center_point(mask) if prompt_mode == "center_point" else gt_box(mask)
            pred_mask, pred_iou = model.predict(pixels, [prompt], multimask=True, refine_steps=refine_steps)
            detections.append(Detection(image_id=im.id, category_id=a.category_id, score=pred_iou, mask=rle_encode(pred_mask)))
    gts = []
    for a in dataset.annotations:
        im = dataset.image_by_id(a.image_id)
        mask = decode_segmentation(a, im.height, im.width)
        if not mask.any():
            continue
        gts.append(a if isinstance(a.segmentation, Rle) else replace(a, segmentation=rle_encode(mask)))
    return coco_map(detections, gts, kind="mask")


@dataclass
class ClassificationReport:
    precision: float
    recall: float
    f1: float
    per_class: list[dict]

    def to_json(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1}


def classification_metrics(pred_labels, true_labels, n_classes: int) -> ClassificationReport:
    """Macro precision/recall/F1 over the classes present in the ground truth."""
    pred = np.asarray(pred_labels, dtype=int)
    true = np.asarray(true_labels, dtype=int)
    if pred.shape != true.shape:
        raise ValueError(f"classification_metrics: length mismatch {pred.shape} vs {true.shape}")
    if pred.size and (pred.min() < 0 or pred.max() >= n_classes or true.min() < 0 or true.max() >= n_classes):
        raise ValueError("classification_metrics: labels out of range")
    per_class = []
    macro = []
    for c in range(n_classes):
        tp = int(np.sum((pred == c) & (true == c)))
        fp = int(np.sum((pred == c) & (true != c)))
        fn = int(np.sum((pred != c) & (true == c)))
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        row = {"class": c, "precision": prec, "recall": rec, "f1": f1, "support": int(np.sum(true == c))}
        per_class.append(row)
        if row["support"] > 0:
            macro.append((prec, rec, f1))
    if macro:
        p, r, f = (float(np.mean([m[i] for m in macro])) for i in range(3))
    else:
        p = r = f = 0.0
    return ClassificationReport(precision=p, recall=r, f1=f, per_class=per_class)
