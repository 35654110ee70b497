"""Operator entry points: synth, convert, train, eval, predict, serve."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .coco import CocoDataset, ImageRecord, InstanceAnnotation, parse_coco, write_coco
from .imageops import load_image, save_gray_png, save_mask_png
from .losses import LossWeights
from .model import ModelConfig, PromptModel, toy_config
from .prompts import Box, Point
from .rle import rle_encode, tight_bbox
from .train import TrainConfig, full_scale_train_config, toy_train_config, train_loop
from .transforms import remove_overlap, split_train_val

MODEL_KEYS = {f.name for f in ModelConfig.__dataclass_fields__.values()}
TRAIN_KEYS = {f.name for f in TrainConfig.__dataclass_fields__.values()}


def _load_config_file(path: str | None, toy: bool, seed: int) -> tuple[ModelConfig, TrainConfig]:
    doc = {}
    if path:
        doc = json.loads(Path(path).read_text())
        unknown = set(doc) - MODEL_KEYS - TRAIN_KEYS - {"loss_weights"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
    model_doc = {k: v for k, v in doc.items() if k in MODEL_KEYS}
    train_doc = {k: v for k, v in doc.items() if k in TRAIN_KEYS and k != "loss_weights"}
    if "milestones" in train_doc:
        train_doc["milestones"] = tuple(train_doc["milestones"])
    if toy:
        mcfg = toy_config()
        tcfg = toy_train_config(seed=seed)
        for k, v in model_doc.items():
            setattr(mcfg, k, v)
        base = tcfg.__dict__ | train_doc
    else:
        mcfg = ModelConfig(**model_doc) if model_doc else ModelConfig()
        base = full_scale_train_config().__dict__ | train_doc
    if "loss_weights" in doc:
        base["loss_weights"] = LossWeights(**doc["loss_weights"])
    base["seed"] = seed
    tcfg = TrainConfig(**{k: v for k, v in base.items() if k in TRAIN_KEYS})
    return mcfg, tcfg


def cmd_synth(args) -> int:
    from .synth import synth_generate

    if args.n < 1:
        raise UsageError("--n must be >= 1")
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    ds = synth_generate(args.n, args.size, args.seed)
    for im in ds.images:
        save_gray_png(out / im.file_name, im.pixels)
    (out / "annotations.json").write_bytes(write_coco(ds))
    print(f"wrote {len(ds.images)} images and {len(ds.annotations)} annotations to {out}", file=sys.stderr)
    return 0


def cmd_convert(args) -> int:
    images_dir = Path(args.images)
    masks_dir = Path(args.masks)
    image_files = sorted(p for p in images_dir.iterdir() if p.suffix.lower() == ".png")
    mask_files = {p.name: p for p in masks_dir.iterdir() if p.suffix.lower() == ".png"}

    problems = []
    for name in sorted(set(mask_files) - {p.name for p in image_files}):
        problems.append(f"orphan mask {mask_files[name]}")
    pairs = []
    for img_path in image_files:
        if img_path.name not in mask_files:
            problems.append(f"image without mask {img_path}")
            continue
        pairs.append((img_path, mask_files[img_path.name]))

    from PIL import Image

    ds = CocoDataset()
    ann_id = 1
    labels_seen: set[int] = set()
    for idx, (img_path, mask_path) in enumerate(pairs, start=1):
        pixels = load_image(img_path)
        with Image.open(mask_path) as m:
            label_img = np.asarray(m.convert("L"))
        if label_img.shape != pixels.shape:
            problems.append(f"size mismatch {mask_path} ({label_img.shape[1]}x{label_img.shape[0]}) vs {img_path} ({pixels.shape[1]}x{pixels.shape[0]})")
            continue
        h, w = pixels.shape
        ds.images.append(ImageRecord(id=idx, file_name=img_path.name, width=w, height=h))
        if args.format == "binary-masks":
            instance_masks = [(label_img > 0).astype(np.uint8)]
            labels = [1]
        else:
            labels = sorted(int(v) for v in np.unique(label_img) if v > 0)
            instance_masks = [(label_img == v).astype(np.uint8) for v in labels]
        for mask, label in zip(remove_overlap(instance_masks), labels):
            if not mask.any():
                print(f"warning: dropping empty instance (label {label}) in {mask_path.name}", file=sys.stderr)
                continue
            labels_seen.add(label)
            ds.annotations.append(
                InstanceAnnotation(
                    id=ann_id,
                    image_id=idx,
                    category_id=label,
                    segmentation=rle_encode(mask),
                    bbox=tight_bbox(mask),
                    area=float(mask.sum()),
                )
            )
            ann_id += 1
    if problems:
        for p in problems:
            print(f"error: {p}", file=sys.stderr)
        return 1
    ds.categories = [(k, f"label_{k}") for k in sorted(labels_seen)]
    Path(args.out).write_bytes(write_coco(ds))
    print(f"wrote {len(ds.images)} images, {len(ds.annotations)} annotations to {args.out}", file=sys.stderr)
    return 0


def _load_dataset(path: str) -> tuple[CocoDataset, Path]:
    data_path = Path(path)
    ds = parse_coco(data_path.read_bytes())
    return ds, data_path.parent


def cmd_train(args) -> int:
    mcfg, tcfg = _load_config_file(args.config, args.toy, args.seed)
    ds, root = _load_dataset(args.data)
    if args.val_fraction > 0 and len(ds.images) * args.val_fraction >= 1:
        train_ds, val_ds = split_train_val(ds, args.val_fraction, seed=tcfg.seed)
    else:
        train_ds, val_ds = ds, None
    model = PromptModel.initialize(mcfg, seed=tcfg.seed)
    train_loop(model, train_ds, tcfg, out_dir=args.out, val_dataset=val_ds, data_root=root)
    print(f"finished {tcfg.total_iters} iterations; checkpoints in {args.out}", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .evals import prompt_eval

    ds, root = _load_dataset(args.data)
    model = load_checkpoint(args.checkpoint)
    report = prompt_eval(model, ds, args.prompt, refine_steps=args.refine_steps, data_root=root)
    print(json.dumps({"map": round(100 * report.map, 1), "map50": round(100 * report.map50, 1)}))
    return 0


def cmd_predict(args) -> int:
    from .checkpoint import load_checkpoint

    model = load_checkpoint(args.checkpoint)
    pixels = load_image(args.image)
    h, w = pixels.shape
    if args.point:
        x, y = (float(v) for v in args.point.split(","))
        prompt = Point(x=x, y=y)
    else:
        x1, y1, x2, y2 = (float(v) for v in args.box.split(","))
        prompt = Box(x1=x1, y1=y1, x2=x2, y2=y2)
    mask, iou = model.predict(pixels, [prompt], multimask=True, refine_steps=args.refine_steps)
    save_mask_png(args.out, mask)
    print(f"{iou:.4f}")
    return 0


def cmd_serve(args) -> int:
    from .service import run_server

    run_server(args.checkpoint, port=args.port, workers=args.workers, max_sessions=args.max_sessions, static_dir=args.static)
    return 0


class UsageError(ValueError):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sonoseg", description="Promptable ultrasound segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("convert", help="convert image + label-mask folders to COCO")
    p.add_argument("--images", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("binary-masks", "coco"), default="coco", help="'coco': one instance per label id; 'binary-masks': any nonzero pixel is one instance")
    p.set_defaults(fn=cmd_convert)

    p = sub.add_parser("train", help="train a model on a COCO dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--toy", action="store_true", help="use the toy model + schedule preset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-fraction", type=float, default=0.05)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="prompt-based mAP evaluation")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", choices=("center_point", "gt_box"), required=True)
    p.add_argument("--refine-steps", type=int, default=1)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="segment one image from a single prompt")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--point", help="X,Y in image pixels")
    p.add_argument("--box", help="X1,Y1,X2,Y2 in image pixels")
    p.add_argument("--out", required=True)
    p.add_argument("--refine-steps", type=int, default=1)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("serve", help="run the interactive annotation service")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--port", type=int, default=8823)
    p.add_argument("--workers", type=int, default=2)
    p.add_argument("--max-sessions", type=int, default=64)
    p.add_argument("--static", help="directory with the browser client bundle")
    p.set_defaults(fn=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "predict" and bool(args.point) == bool(args.box):
        parser.error("predict: exactly one of --point or --box is required")
    try:
        return args.fn(args)
    except UsageError as e:
        parser.error(str(e))
    except BrokenPipeError:
        return 1
    except Exception as e:  # single-line diagnostic, nonzero exit
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
