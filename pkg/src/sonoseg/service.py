"""HTTP annotation service: upload once, prompt many times, export COCO.

Each uploaded image is preprocessed and embedded exactly once; subsequent
predict calls decode against the cached embedding.  Sessions live in memory
with LRU eviction.
"""

from __future__ import annotations

import hashlib
import itertools
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.staticfiles import StaticFiles

from .coco import CocoDataset, ImageRecord, InstanceAnnotation, write_coco
from .model import PromptModel
from .prompts import Box, Point, Prompt
from .rle import Rle, rle_decode, tight_bbox
from .tensor import Tensor, no_grad

__all__ = ["create_app", "run_server"]

MAX_UPLOAD_BYTES = 8 * 1024 * 1024


@dataclass
class Session:
    image_id: str
    numeric_id: int
    orig_w: int
    orig_h: int
    input_hw: tuple[int, int]
    sx: float
    sy: float
    embedding: Tensor
    accepted: list[tuple[Rle, int]] = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)


def _parse_prompts(body: dict, width: int, height: int) -> list[Prompt]:
    raw = body.get("prompts")
    if not isinstance(raw, list) or not raw:
        raise HTTPException(status_code=422, detail="prompts must be a non-empty array")
    prompts: list[Prompt] = []
    for i, p in enumerate(raw):
        if not isinstance(p, dict):
            raise HTTPException(status_code=422, detail=f"prompt {i} must be an object")
        kind = p.get("type")
        try:
            if kind == "point":
                x, y = float(p["x"]), float(p["y"])
                if not (0 <= x <= width and 0 <= y <= height):
                    raise HTTPException(status_code=422, detail=f"prompt {i}: point ({x}, {y}) outside {width}x{height}")
                prompts.append(Point(x=x, y=y))
            elif kind == "box":
                x1, y1, x2, y2 = (float(p[k]) for k in ("x1", "y1", "x2", "y2"))
                if not (x1 < x2 and y1 < y2):
                    raise HTTPException(status_code=422, detail=f"prompt {i}: box corners must satisfy x1<x2, y1<y2")
                if not (0 <= x1 and 0 <= y1 and x2 <= width and y2 <= height):
                    raise HTTPException(status_code=422, detail=f"prompt {i}: box outside {width}x{height}")
                prompts.append(Box(x1=x1, y1=y1, x2=x2, y2=y2))
            else:
                raise HTTPException(status_code=422, detail=f"prompt {i}: unknown type {kind!r}")
        except (KeyError, TypeError, ValueError):
            raise HTTPException(status_code=422, detail=f"prompt {i}: malformed coordinates") from None
    return prompts


def create_app(model: PromptModel, max_sessions: int = 64, workers: int = 2, checkpoint_hash: str = "unset", static_dir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="sonoseg annotation service")
    sessions: OrderedDict[str, Session] = OrderedDict()
    registry_lock = threading.Lock()
    inference_slots = threading.BoundedSemaphore(max(1, workers))
    counter = itertools.count(1)
    app.state.model = model
    app.state.sessions = sessions

    def get_session(image_id: str) -> Session:
        with registry_lock:
            sess = sessions.get(image_id)
            if sess is None:
                raise HTTPException(status_code=404, detail=f"unknown image_id {image_id!r}")
            sessions.move_to_end(image_id)
            return sess

    @app.post("/v1/images")
    async def upload(request: Request):
        from .imageops import decode_image_bytes

        body = await request.body()
        if len(body) > MAX_UPLOAD_BYTES:
            raise HTTPException(status_code=413, detail=f"payload exceeds {MAX_UPLOAD_BYTES} bytes")
        try:
            pixels = decode_image_bytes(body)
        except Exception:
            raise HTTPException(status_code=415, detail="body is not a decodable image") from None
        h, w = pixels.shape
        with inference_slots:
            padded, sx, sy, input_hw = model.preprocess(pixels)
            with no_grad():
                embedding = model.encode_image(padded)
        numeric = next(counter)
        sess = Session(image_id=f"img-{numeric:06d}", numeric_id=numeric, orig_w=w, orig_h=h, input_hw=input_hw, sx=sx, sy=sy, embedding=embedding)
        with registry_lock:
            sessions[sess.image_id] = sess
            while len(sessions) > max_sessions:
                sessions.popitem(last=False)
        return {"image_id": sess.image_id, "width": w, "height": h}

    @app.post("/v1/images/{image_id}/predict")
    async def predict(image_id: str, request: Request):
        sess = get_session(image_id)
        body = await request.json()
        prompts = _parse_prompts(body, sess.orig_w, sess.orig_h)
        multimask = bool(body.get("multimask", True))
        refine_steps = int(body.get("refine_steps", 1))
        with inference_slots:
            masks, ious, best = model.predict_candidates(
                None,
                prompts,
                multimask=multimask,
                refine_steps=refine_steps,
                image_emb=sess.embedding,
                geometry=(sess.sx, sess.sy, sess.input_hw, (sess.orig_h, sess.orig_w)),
            )
        from .rle import rle_encode

        return {
            "masks": [{"rle": rle_encode(m).to_json(), "iou": iou} for m, iou in zip(masks, ious)],
            "best": best,
        }

    @app.post("/v1/images/{image_id}/accept")
    async def accept(image_id: str, request: Request):
        sess = get_session(image_id)
        body = await request.json()
        raw = body.get("rle")
        if not isinstance(raw, dict) or "size" not in raw or "counts" not in raw:
            raise HTTPException(status_code=422, detail="rle must be {size: [h, w], counts: [...]}")
        r = Rle(size=(int(raw["size"][0]), int(raw["size"][1])), counts=[int(c) for c in raw["counts"]])
        if r.size != (sess.orig_h, sess.orig_w):
            raise HTTPException(status_code=422, detail=f"rle size {list(r.size)} does not match image {sess.orig_h}x{sess.orig_w}")
        try:
            r.validate()
        except ValueError as e:
            raise HTTPException(status_code=422, detail=str(e)) from None
        category_id = int(body.get("category_id", 1))
        with sess.lock:
            sess.accepted.append((r, category_id))
            count = len(sess.accepted)
        return {"count": count}

    @app.get("/v1/export")
    def export():
        ds = CocoDataset()
        ann_id = 1
        used_categories: set[int] = set()
        with registry_lock:
            ordered = sorted(sessions.values(), key=lambda s: s.numeric_id)
        for sess in ordered:
            ds.images.append(ImageRecord(id=sess.numeric_id, file_name=f"{sess.image_id}.png", width=sess.orig_w, height=sess.orig_h))
            with sess.lock:
                accepted = list(sess.accepted)
            for r, cat in accepted:
                mask = rle_decode(r)
                if not mask.any():
                    continue
                used_categories.add(cat)
                ds.annotations.append(
                    InstanceAnnotation(
                        id=ann_id,
                        image_id=sess.numeric_id,
                        category_id=cat,
                        segmentation=r,
                        bbox=tight_bbox(mask),
                        area=float(mask.sum()),
                        iscrowd=0,
                    )
                )
                ann_id += 1
        ds.categories = [(c, f"class_{c}") for c in sorted(used_categories)]
        return Response(content=write_coco(ds), media_type="application/json")

    @app.get("/v1/health")
    def health():
        return {"status": "ok", "model": model.config.to_json(), "checkpoint_hash": checkpoint_hash}

    if static_dir is not None and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="ui")
    return app


def checkpoint_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run_server(checkpoint: str, port: int = 8823, workers: int = 2, max_sessions: int = 64, static_dir: str | None = None) -> None:
    """Load the checkpoint and serve; any load failure propagates (no degraded serving)."""
    import uvicorn

    from .checkpoint import load_checkpoint

    model = load_checkpoint(checkpoint)
    app = create_app(model, max_sessions=max_sessions, workers=workers, checkpoint_hash=checkpoint_digest(checkpoint), static_dir=static_dir)
    uvicorn.run(app, host="127.0.0.1", port=port, log_level="warning")
