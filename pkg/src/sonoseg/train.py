"""Fine-tuning loop: prompt-simulated batches, warmup/milestone schedule, AdamW."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .coco import CocoDataset, ImageRecord, decode_segmentation
from .imageops import bilinear_resize, load_image, nearest_resize, pad_to_square, resize_longest_extents
from .losses import LossWeights, focal_loss, instance_loss
from .model import ModelConfig, PromptModel
from .optim import AdamWState, adamw_step, init_adamw
from .prompts import Prompt, sample_training_prompt
from .tensor import Tensor, backward

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainState",
    "TrainingAborted",
    "lr_at",
    "assemble_batch",
    "train_step",
    "train_loop",
    "train_classifier",
    "toy_train_config",
    "full_scale_train_config",
    "save_train_state",
    "load_train_state",
]


@dataclass
class TrainConfig:
    total_iters: int = 30_000
    base_lr: float = 1e-4
    warmup_iters: int = 500
    milestones: tuple[int, ...] = (20_000, 28_888)
    decay_factor: float = 0.1
    batch_size: int = 8
    flip_prob: float = 0.5
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    val_every: int = 1_000
    prompts_per_image: int | None = None  # None = one prompt for every instance

    def __post_init__(self):
        if list(self.milestones) != sorted(set(self.milestones)) or any(m >= self.total_iters for m in self.milestones):
            raise ValueError("milestones must be strictly increasing and < total_iters")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip_prob must be in [0,1], got {self.flip_prob}")


def full_scale_train_config() -> TrainConfig:
    return TrainConfig()


def toy_train_config(seed: int = 0) -> TrainConfig:
    return TrainConfig(
        total_iters=1_200,
        base_lr=2e-3,
        warmup_iters=50,
        milestones=(700, 1_000),
        decay_factor=0.1,
        batch_size=4,
        flip_prob=0.0,
        seed=seed,
        val_every=400,
    )


@dataclass
class LossRecord:
    iter: int
    lr: float
    total: float
    focal: float
    dice: float
    iou: float

    def to_json(self) -> dict:
        return {"iter": self.iter, "lr": self.lr, "loss_total": self.total, "loss_focal": self.focal, "loss_dice": self.dice, "loss_iou": self.iou}


@dataclass
class TrainState:
    iter: int = 0
    optimizer: AdamWState | None = None
    best_val_metric: float = float("-inf")
    loss_history: list[LossRecord] = field(default_factory=list)
    val_history: list[dict] = field(default_factory=list)


class TrainingAborted(RuntimeError):
    """Raised when a step produces a non-finite loss; carries a diagnostic dump."""


def lr_at(config: TrainConfig, iteration: int) -> float:
    """Linear warmup from 0, then step decay at each milestone (f32 arithmetic)."""
    if not 0 <= iteration <= config.total_iters:
        raise ValueError(f"lr_at: iteration {iteration} outside [0, {config.total_iters}]")
    base = np.float32(config.base_lr)
    if config.warmup_iters > 0 and iteration < config.warmup_iters:
        return float(base * np.float32(iteration / config.warmup_iters))
    lr = base
    for m in config.milestones:
        if iteration >= m:
            lr = np.float32(lr * np.float32(config.decay_factor))
    return float(lr)


def step_rng(seed: int, iteration: int) -> np.random.Generator:
    """Fresh deterministic generator for one step; makes resumed runs identical."""
    return np.random.default_rng([seed, iteration])


@dataclass
class BatchInstance:
    target: np.ndarray  # {0,1} mask at the mask-logit resolution
    prompt: Prompt


@dataclass
class BatchItem:
    image_id: int
    pixels: np.ndarray  # model-input pixels, padded square
    instances: list[BatchInstance]


def load_pixels(ds: CocoDataset, image: ImageRecord, root: Path | None = None) -> np.ndarray:
    if image.pixels is not None:
        return image.pixels
    path = Path(image.file_name)
    if root is not None:
        path = root / path
    image.pixels = load_image(path)
    return image.pixels


def assemble_batch(
    ds: CocoDataset,
    batch_size: int,
    rng: np.random.Generator,
    flip_prob: float,
    model_config: ModelConfig,
    root: Path | None = None,
    prompts_per_image: int | None = None,
) -> list[BatchItem]:
    """Sample images with replacement and simulate one prompt per instance.

    Flips happen before the resize so prompts are drawn in final model
    coordinates; targets are nearest-downscaled to the logit resolution.
    """
    usable = [im for im in ds.images if any(a.image_id == im.id for a in ds.annotations)]
    skipped = len(ds.images) - len(usable)
    if skipped:
        log.warning("assemble_batch: skipping %d images with no instances", skipped)
    if not usable:
        raise ValueError("assemble_batch: dataset has no annotated images")

    size = model_config.image_size
    res = model_config.mask_res
    batch = []
    for _ in range(batch_size):
        im = usable[int(rng.integers(len(usable)))]
        pixels = load_pixels(ds, im, root)
        anns = [a for a in ds.annotations if a.image_id == im.id]
        masks = [decode_segmentation(a, im.height, im.width) for a in anns]
        if flip_prob > 0 and rng.random() < flip_prob:
            pixels = pixels[:, ::-1]
            masks = [m[:, ::-1] for m in masks]
        new_h, new_w = resize_longest_extents(im.height, im.width, size)
        canvas = pad_to_square(bilinear_resize(pixels, new_h, new_w), size)

        if prompts_per_image is not None and len(anns) > prompts_per_image:
            chosen = rng.choice(len(anns), size=prompts_per_image, replace=False)
            masks = [masks[i] for i in sorted(chosen)]
        instances = []
        for mask in masks:
            scaled = np.zeros((size, size), dtype=np.uint8)
            scaled[:new_h, :new_w] = nearest_resize(mask, new_h, new_w)
            if not scaled.any():
                continue
            prompt = sample_training_prompt(scaled, size, size, rng)
            instances.append(BatchInstance(target=nearest_resize(scaled, res, res), prompt=prompt))
        batch.append(BatchItem(image_id=im.id, pixels=canvas, instances=instances))
    return batch


def train_step(model: PromptModel, batch: list[BatchItem], state: TrainState, config: TrainConfig) -> LossRecord:
    """One optimization step: forward with a refinement decode, backward, AdamW."""
    if state.optimizer is None:
        state.optimizer = init_adamw(model.trainable_params())
    lr = lr_at(config, state.iter)
    terms = []
    agg = {"focal": 0.0, "dice": 0.0, "iou": 0.0}
    n_inst = 0
    for item in batch:
        if not item.instances:
            continue
        emb = model.encode_image(item.pixels)
        for inst in item.instances:
            sparse = model.encode_prompts([inst.prompt])
            pred1 = model.decode(emb, sparse)
            loss1, diag1 = instance_loss(pred1, inst.target, config.loss_weights)
            # refinement consumes the candidate the loss supervises; the IoU-head
            # argmax is too noisy to gate training early on
            pred2 = model.decode(emb, sparse, pred1.mask_logits.data[diag1.chosen_index])
            loss2, diag2 = instance_loss(pred2, inst.target, config.loss_weights)
            terms.append(T.scale(T.add(loss1, loss2), 0.5))
            for key, d1, d2 in (("focal", diag1.focal, diag2.focal), ("dice", diag1.dice, diag2.dice), ("iou", diag1.iou, diag2.iou)):
                agg[key] += 0.5 * (d1 + d2)
            n_inst += 1
    if not terms:
        raise ValueError("train_step: batch contains no usable instances")
    total = T.scale(sum_tensors(terms), 1.0 / len(batch))
    record = LossRecord(
        iter=state.iter,
        lr=lr,
        total=total.item(),
        focal=agg["focal"] / len(batch),
        dice=agg["dice"] / len(batch),
        iou=agg["iou"] / len(batch),
    )
    if not np.isfinite(record.total):
        raise TrainingAborted(f"non-finite loss at iter {record.iter}: lr={lr} focal={record.focal} dice={record.dice} iou={record.iou}")
    backward(total)
    if lr > 0:  # iter 0 of a fresh warmup has lr exactly 0: nothing to apply
        trainable = model.trainable_params()
        # parameters untouched this step (e.g. the unused prompt type) get zero grads
        grads = {name: p.grad if p.grad is not None else np.zeros_like(p.data) for name, p in trainable.items()}
        adamw_step(trainable, grads, state.optimizer, lr)
    model.zero_grads()
    state.iter += 1
    state.loss_history.append(record)
    return record


def sum_tensors(tensors: list[Tensor]) -> Tensor:
    out = tensors[0]
    for t in tensors[1:]:
        out = T.add(out, t)
    return out


def train_loop(
    model: PromptModel,
    dataset: CocoDataset,
    config: TrainConfig,
    out_dir: Path | str | None = None,
    val_dataset: CocoDataset | None = None,
    state: TrainState | None = None,
    data_root: Path | None = None,
    log_file=None,
) -> tuple[PromptModel, TrainState]:
    """Run the full schedule with periodic validation and checkpointing.

    `dataset` is the training split; pass `val_dataset` explicitly or let the
    caller pre-split.  Emits JSON-lines records (one per step, one per
    validation) to `out_dir`/log.jsonl when requested.
    """
    from .checkpoint import save_checkpoint
    from .evals import prompt_eval

    state = state or TrainState()
    if state.optimizer is None:
        state.optimizer = init_adamw(model.trainable_params())
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    lines = []

    def emit(rec: dict):
        lines.append(json.dumps(rec))
        if log_file is not None:
            log_file.write(lines[-1] + "\n")

    while state.iter < config.total_iters:
        rng = step_rng(config.seed, state.iter)
        batch = assemble_batch(dataset, config.batch_size, rng, config.flip_prob, model.config, root=data_root, prompts_per_image=config.prompts_per_image)
        record = train_step(model, batch, state, config)
        emit(record.to_json())
        if not all(np.all(np.isfinite(p.data)) for p in model.params.values()):
            raise TrainingAborted(f"non-finite parameter after iter {record.iter}")

        if config.val_every and state.iter % config.val_every == 0:
            if val_dataset is not None and val_dataset.annotations:
                point = prompt_eval(model, val_dataset, "center_point", data_root=data_root)
                box = prompt_eval(model, val_dataset, "gt_box", data_root=data_root)
                val_rec = {
                    "iter": state.iter,
                    "map_point": point.map,
                    "map50_point": point.map50,
                    "map_box": box.map,
                    "map50_box": box.map50,
                }
                state.val_history.append(val_rec)
                emit(val_rec)
                metric = 0.5 * (point.map + box.map)
                if metric > state.best_val_metric:
                    state.best_val_metric = metric
                    if out is not None:
                        save_checkpoint(model, out / "checkpoint_best.ckpt")
                        save_train_state(state, out / "checkpoint_best.state.npz")
            else:
                log.warning("train_loop: no validation data, skipping validation at iter %d", state.iter)

    if out is not None:
        save_checkpoint(model, out / "checkpoint_final.ckpt")
        save_train_state(state, out / "checkpoint_final.state.npz")
        (out / "log.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))
    return model, state


def save_train_state(state: TrainState, path) -> None:
    arrays = {}
    opt = state.optimizer
    for name, arr in opt.m.items():
        arrays[f"m::{name}"] = arr
    for name, arr in opt.v.items():
        arrays[f"v::{name}"] = arr
    meta = {
        "iter": state.iter,
        "best_val_metric": state.best_val_metric,
        "step_count": opt.step_count,
        "beta1": opt.beta1,
        "beta2": opt.beta2,
        "eps": opt.eps,
        "weight_decay": opt.weight_decay,
    }
    np.savez(path, __meta__=json.dumps(meta), **arrays)


def load_train_state(path) -> TrainState:
    blob = np.load(path)
    meta = json.loads(str(blob["__meta__"]))
    opt = AdamWState(beta1=meta["beta1"], beta2=meta["beta2"], eps=meta["eps"], weight_decay=meta["weight_decay"], step_count=int(meta["step_count"]))
    for key in blob.files:
        if key.startswith("m::"):
            opt.m[key[3:]] = blob[key]
        elif key.startswith("v::"):
            opt.v[key[3:]] = blob[key]
    return TrainState(iter=int(meta["iter"]), optimizer=opt, best_val_metric=float(meta["best_val_metric"]))


# ---------------------------------------------------------------------------
# classification head training (linear probe over the frozen encoder)


def train_classifier(
    model: PromptModel,
    dataset: CocoDataset,
    labels: dict[int, int],
    iters: int = 500,
    lr: float = 1e-3,
    batch_size: int = 8,
    focal_alpha: float = 0.25,
    focal_gamma: float = 2.0,
    finetune_encoder: bool = True,
    seed: int = 0,
    data_root: Path | None = None,
) -> list[float]:
    """Fit the mean-pool + linear head with focal loss.

    With `finetune_encoder` (the default, matching how the backbone is used
    downstream) the ViT trains jointly with the head; otherwise the encoder
    stays frozen and only the linear probe moves.  `labels` maps image id to
    a 0-based class.  Returns the per-step loss history.
    """
    cfg = model.config
    if cfg.n_classes is None:
        raise ValueError("train_classifier: model has no classification head")
    images = list(dataset.images)
    padded = {}
    for im in images:
        pixels = load_pixels(dataset, im, data_root)
        padded[im.id], _, _, _ = model.preprocess(pixels)
    eye = np.eye(cfg.n_classes, dtype=np.float32)

    names = ["cls.weight", "cls.bias"]
    if finetune_encoder:
        names += [n for n in model.params if n.startswith(("patch_embed.", "pos_embed", "enc."))]
    trainable = {n: model.params[n] for n in names}
    opt = init_adamw(trainable, weight_decay=0.0)
    history = []
    for step in range(iters):
        rng = step_rng(seed, step)
        chosen = [images[int(i)] for i in rng.integers(len(images), size=min(batch_size, len(images)))]
        rows = []
        for im in chosen:
            tokens = model.encode_tokens(padded[im.id])
            pooled = T.reshape(T.tmean(tokens, axis=0), (1, cfg.embed_dim))
            rows.append(pooled)
        logits = T.add(T.matmul(T.concat(rows, axis=0), model.params["cls.weight"]), model.params["cls.bias"])
        onehot = eye[np.array([labels[im.id] for im in chosen])]
        loss = focal_loss(logits, onehot, alpha=focal_alpha, gamma=focal_gamma)
        history.append(loss.item())
        for p in trainable.values():
            p.grad = None
        backward(loss)
        grads = {n: p.grad if p.grad is not None else np.zeros_like(p.data) for n, p in trainable.items()}
        adamw_step(trainable, grads, opt, lr)
        model.zero_grads()
    return history
