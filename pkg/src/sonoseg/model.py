"""Promptable segmentation network: ViT encoder, prompt encoder, two-way decoder.

The network follows the encode-once / prompt-many factorization: an image is
embedded by the ViT once, then any number of point/box prompts are decoded
against the cached embedding.  The decoder emits several candidate masks per
prompt plus a predicted IoU for each, and can run an extra refinement pass in
which the previous mask logits are downscaled and added to the image
embedding.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .imageops import bilinear_resize, pad_to_square, resize_longest_extents
from .prompts import Box, Point, Prompt
from .tensor import Tensor

__all__ = ["ModelConfig", "MaskPrediction", "PromptModel", "toy_config", "full_scale_config"]


@dataclass
class ModelConfig:
    image_size: int = 64  # square model input, after padding
    patch: int = 8
    embed_dim: int = 64
    encoder_depth: int = 2
    encoder_heads: int = 4
    decoder_depth: int = 2
    decoder_heads: int = 4
    num_mask_tokens: int = 4  # multimask outputs + 1
    pe_num_freqs: int = 16  # per-axis random frequencies; 4*pe_num_freqs == embed_dim
    channels: int = 1
    n_classes: int | None = None

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ValueError(f"image_size {self.image_size} not divisible by patch {self.patch}")
        if self.embed_dim % self.encoder_heads or self.embed_dim % self.decoder_heads:
            raise ValueError("embed_dim must be divisible by the head counts")
        if self.num_mask_tokens < 2:
            raise ValueError("num_mask_tokens must be >= 2")
        if 4 * self.pe_num_freqs != self.embed_dim:
            raise ValueError("pe_num_freqs must equal embed_dim / 4")
        if self.embed_dim % 8:
            raise ValueError("embed_dim must be divisible by 8 (mask upscaling)")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def mask_res(self) -> int:
        return 4 * self.grid

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "ModelConfig":
        return cls(**doc)


def toy_config(n_classes: int | None = None) -> ModelConfig:
    return ModelConfig(image_size=64, patch=8, embed_dim=64, encoder_depth=2, encoder_heads=4, decoder_depth=2, decoder_heads=4, pe_num_freqs=16, n_classes=n_classes)


def full_scale_config() -> ModelConfig:
    return ModelConfig(image_size=1024, patch=16, embed_dim=768, encoder_depth=12, encoder_heads=12, decoder_depth=2, decoder_heads=8, pe_num_freqs=192)


@dataclass
class MaskPrediction:
    """Candidate mask logits with per-candidate predicted IoU."""

    mask_logits: Tensor  # [n_candidates, R, R]
    iou_pred: Tensor  # [n_candidates], sigmoid-squashed
    best_index: int  # argmax of iou_pred, first index on ties


# parameters that exist but are never updated (fixed at initialization)
FROZEN_PARAMS = {"pe.freqs"}

_ATTN_SUFFIXES = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


class PromptModel:
    """Configuration plus the named parameter map of the full network."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], dtype=np.float32):
        self.config = config
        self.params = params
        self.dtype = dtype
        self.encode_calls = 0  # instrumentation: encode-once contract checks
        self._dense_pe: np.ndarray | None = None

    # ------------------------------------------------------------------
    # construction

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "PromptModel":
        rng = np.random.default_rng(seed)
        d = config.embed_dim
        params: dict[str, Tensor] = {}

        def tn(name: str, *shape, std: float = 0.02):
            data = np.clip(rng.standard_normal(shape) * std, -2 * std, 2 * std)
            params[name] = Tensor(data.astype(dtype), requires_grad=True)

        def zeros(name: str, *shape):
            params[name] = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

        def ones(name: str, *shape):
            params[name] = Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

        def attn(prefix: str):
            for w in ("wq", "wk", "wv", "wo"):
                tn(f"{prefix}.{w}", d, d)
            for b in ("bq", "bk", "bv", "bo"):
                zeros(f"{prefix}.{b}", d)

        def norm(prefix: str, dim: int = 0):
            ones(f"{prefix}.gain", dim or d)
            zeros(f"{prefix}.bias", dim or d)

        tn("patch_embed.weight", d, config.channels * config.patch * config.patch)
        zeros("patch_embed.bias", d)
        tn("pos_embed", config.grid * config.grid, d)
        for i in range(config.encoder_depth):
            norm(f"enc.{i}.norm1")
            attn(f"enc.{i}.attn")
            norm(f"enc.{i}.norm2")
            tn(f"enc.{i}.mlp.w1", d, 4 * d)
            zeros(f"enc.{i}.mlp.b1", 4 * d)
            tn(f"enc.{i}.mlp.w2", 4 * d, d)
            zeros(f"enc.{i}.mlp.b2", d)
        norm("enc.norm")

        params["pe.freqs"] = Tensor(rng.standard_normal((2, config.pe_num_freqs)).astype(dtype), requires_grad=False)
        tn("prompt.point", d)
        tn("prompt.box_tl", d)
        tn("prompt.box_br", d)
        tn("tokens.iou", 1, d)
        tn("tokens.mask", config.num_mask_tokens, d)

        for i in range(config.decoder_depth):
            attn(f"dec.{i}.self_attn")
            norm(f"dec.{i}.norm1")
            attn(f"dec.{i}.cross_t2i")
            norm(f"dec.{i}.norm2")
            tn(f"dec.{i}.mlp.w1", d, 4 * d)
            zeros(f"dec.{i}.mlp.b1", 4 * d)
            tn(f"dec.{i}.mlp.w2", 4 * d, d)
            zeros(f"dec.{i}.mlp.b2", d)
            norm(f"dec.{i}.norm3")
            attn(f"dec.{i}.cross_i2t")
            norm(f"dec.{i}.norm4")
        attn("dec.final_attn")
        norm("dec.norm_final")

        tn("up.0.weight", d, d // 4, 2, 2)
        zeros("up.0.bias", d // 4)
        norm("up.ln", d // 4)
        tn("up.1.weight", d // 4, d // 8, 2, 2)
        zeros("up.1.bias", d // 8)
        for m in range(config.num_mask_tokens):
            tn(f"hyper.{m}.w1", d, d)
            zeros(f"hyper.{m}.b1", d)
            tn(f"hyper.{m}.w2", d, d)
            zeros(f"hyper.{m}.b2", d)
            tn(f"hyper.{m}.w3", d, d // 8)
            zeros(f"hyper.{m}.b3", d // 8)
        tn("iou_head.w1", d, d)
        zeros("iou_head.b1", d)
        tn("iou_head.w2", d, d)
        zeros("iou_head.b2", d)
        tn("iou_head.w3", d, config.num_mask_tokens)
        zeros("iou_head.b3", config.num_mask_tokens)

        # refinement encoder; final projection starts at zero so the first
        # refinement pass is exactly the identity
        c1, c2 = max(d // 16, 2), max(d // 4, 4)
        tn("maskenc.0.weight", c1, 4)
        zeros("maskenc.0.bias", c1)
        norm("maskenc.ln0", c1)
        tn("maskenc.1.weight", c2, c1 * 4)
        zeros("maskenc.1.bias", c2)
        norm("maskenc.ln1", c2)
        zeros("maskenc.2.weight", c2, d)
        zeros("maskenc.2.bias", d)

        if config.n_classes is not None:
            tn("cls.weight", d, config.n_classes)
            zeros("cls.bias", config.n_classes)
        return cls(config, params, dtype=dtype)

    def trainable_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k not in FROZEN_PARAMS}

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    # ------------------------------------------------------------------
    # building blocks

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _attention(self, prefix: str, q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
        wq, bq, wk, bk, wv, bv, wo, bo = (self._p(f"{prefix}.{s}") for s in _ATTN_SUFFIXES)
        d = self.config.embed_dim
        dh = d // heads
        nq, nk = q.shape[0], k.shape[0]

        def split(x: Tensor, n: int) -> Tensor:
            return T.transpose(T.reshape(x, (n, heads, dh)), (1, 0, 2))

        qh = split(T.add(T.matmul(q, wq), bq), nq)
        kh = split(T.add(T.matmul(k, wk), bk), nk)
        vh = split(T.add(T.matmul(v, wv), bv), nk)
        att = T.scale(T.matmul(qh, T.transpose(kh, (0, 2, 1))), 1.0 / math.sqrt(dh))
        att = T.softmax(att, axis=-1)
        out = T.reshape(T.transpose(T.matmul(att, vh), (1, 0, 2)), (nq, d))
        return T.add(T.matmul(out, wo), bo)

    def _mlp(self, prefix: str, x: Tensor, act=T.gelu) -> Tensor:
        h = act(T.add(T.matmul(x, self._p(f"{prefix}.w1")), self._p(f"{prefix}.b1")))
        return T.add(T.matmul(h, self._p(f"{prefix}.w2")), self._p(f"{prefix}.b2"))

    def _norm(self, prefix: str, x: Tensor) -> Tensor:
        return T.layer_norm(x, self._p(f"{prefix}.gain"), self._p(f"{prefix}.bias"))

    def _norm2d(self, prefix: str, grid: Tensor) -> Tensor:
        c, h, w = grid.shape
        flat = T.reshape(T.transpose(grid, (1, 2, 0)), (h * w, c))
        flat = self._norm(prefix, flat)
        return T.transpose(T.reshape(flat, (h, w, c)), (2, 0, 1))

    # ------------------------------------------------------------------
    # image encoder

    def encode_tokens(self, pixels: np.ndarray | Tensor) -> Tensor:
        """ViT forward; returns the [grid², d] token matrix after the final norm."""
        cfg = self.config
        if isinstance(pixels, Tensor):
            img = pixels
        else:
            arr = np.asarray(pixels, dtype=self.dtype)
            if arr.ndim == 2:
                arr = np.broadcast_to(arr, (cfg.channels, *arr.shape)).copy()
            img = Tensor(arr)
        if img.shape != (cfg.channels, cfg.image_size, cfg.image_size):
            raise T.ShapeError(f"encode_image: expected {(cfg.channels, cfg.image_size, cfg.image_size)} pixels, got {img.shape}")
        self.encode_calls += 1
        x = T.patch_embed(img, cfg.patch, self._p("patch_embed.weight"), self._p("patch_embed.bias"))
        x = T.add(x, self._p("pos_embed"))
        for i in range(cfg.encoder_depth):
            x = T.add(x, self._attention(f"enc.{i}.attn", *(self._norm(f"enc.{i}.norm1", x),) * 3, cfg.encoder_heads))
            x = T.add(x, self._mlp(f"enc.{i}.mlp", self._norm(f"enc.{i}.norm2", x)))
        return self._norm("enc.norm", x)

    def encode_image(self, pixels: np.ndarray | Tensor) -> Tensor:
        """Embed model-sized pixels into a [d, s, s] grid (s = image_size/patch)."""
        s = self.config.grid
        tokens = self.encode_tokens(pixels)
        return T.transpose(T.reshape(tokens, (s, s, self.config.embed_dim)), (2, 0, 1))

    # ------------------------------------------------------------------
    # prompt encoder

    def _fourier(self, coords: np.ndarray) -> np.ndarray:
        """Axis-separable random-Fourier features of [n,2] coords in [0,1]."""
        freqs = self._p("pe.freqs").data  # [2, nf]
        phases = 2.0 * np.pi * (2.0 * coords[:, :, None] - 1.0) * freqs[None, :, :]  # [n, 2, nf]
        feats = np.concatenate([np.sin(phases), np.cos(phases)], axis=2)  # [n, 2, 2nf]
        return feats.reshape(coords.shape[0], -1).astype(self.dtype)

    def _dense_positional(self) -> np.ndarray:
        if self._dense_pe is None:
            s = self.config.grid
            ii, jj = np.mgrid[0:s, 0:s]
            coords = np.stack([(jj.reshape(-1) + 0.5) / s, (ii.reshape(-1) + 0.5) / s], axis=1)
            self._dense_pe = self._fourier(coords)
        return self._dense_pe

    def encode_prompts(self, prompts: list[Prompt], image_size: float | None = None) -> Tensor:
        """Turn prompts into sparse query tokens [k, d] (1 per point, 2 per box)."""
        if not prompts:
            raise ValueError("encode_prompts: empty prompt list")
        size = float(image_size if image_size is not None else self.config.image_size)
        rows: list[Tensor] = []
        for p in prompts:
            if isinstance(p, Point):
                pe = self._fourier(np.array([[p.x / size, p.y / size]]))
                rows.append(T.add(Tensor(pe), T.reshape(self._p("prompt.point"), (1, -1))))
            elif isinstance(p, Box):
                pe = self._fourier(np.array([[p.x1 / size, p.y1 / size], [p.x2 / size, p.y2 / size]]))
                rows.append(T.add(Tensor(pe[0:1]), T.reshape(self._p("prompt.box_tl"), (1, -1))))
                rows.append(T.add(Tensor(pe[1:2]), T.reshape(self._p("prompt.box_br"), (1, -1))))
            else:
                raise TypeError(f"encode_prompts: unsupported prompt {type(p).__name__}")
        return T.concat(rows, axis=0)

    # ------------------------------------------------------------------
    # mask decoder

    def _encode_prev_mask(self, prev: Tensor | np.ndarray) -> Tensor:
        """Downscale previous mask logits [R,R] to image-embedding tokens [s², d]."""
        cfg = self.config
        r = cfg.mask_res
        prev_t = prev if isinstance(prev, Tensor) else Tensor(np.asarray(prev, dtype=self.dtype))
        if prev_t.shape != (r, r):
            raise T.ShapeError(f"decode: prev_mask_logits must be {(r, r)}, got {prev_t.shape}")

        def to_grid(tokens: Tensor, side: int) -> Tensor:
            c = tokens.shape[1]
            return T.transpose(T.reshape(tokens, (side, side, c)), (2, 0, 1))

        x = T.reshape(prev_t, (1, r, r))
        t = T.patch_embed(x, 2, self._p("maskenc.0.weight"), self._p("maskenc.0.bias"))
        t = T.gelu(self._norm("maskenc.ln0", t))
        t = T.patch_embed(to_grid(t, r // 2), 2, self._p("maskenc.1.weight"), self._p("maskenc.1.bias"))
        t = T.gelu(self._norm("maskenc.ln1", t))
        return T.add(T.matmul(t, self._p("maskenc.2.weight")), self._p("maskenc.2.bias"))

    def decode(self, image_emb: Tensor, sparse: Tensor, prev_mask_logits: Tensor | np.ndarray | None = None) -> MaskPrediction:
        """Two-way transformer decode of prompt tokens against an image embedding."""
        cfg = self.config
        d, s = cfg.embed_dim, cfg.grid
        if image_emb.shape != (d, s, s):
            raise T.ShapeError(f"decode: image embedding must be {(d, s, s)}, got {image_emb.shape}")
        if sparse.shape[-1] != d:
            raise T.ShapeError(f"decode: sparse tokens must have width {d}, got {sparse.shape}")

        keys = T.reshape(T.transpose(image_emb, (1, 2, 0)), (s * s, d))
        if prev_mask_logits is not None:
            keys = T.add(keys, self._encode_prev_mask(prev_mask_logits))
        queries = T.concat([self._p("tokens.iou"), self._p("tokens.mask"), sparse], axis=0)
        q_pe = queries
        k_pe = Tensor(self._dense_positional())

        for i in range(cfg.decoder_depth):
            pre = f"dec.{i}"
            if i == 0:
                attn = self._attention(f"{pre}.self_attn", queries, queries, queries, cfg.decoder_heads)
            else:
                q = T.add(queries, q_pe)
                attn = self._attention(f"{pre}.self_attn", q, q, queries, cfg.decoder_heads)
            queries = self._norm(f"{pre}.norm1", T.add(queries, attn))
            q = T.add(queries, q_pe)
            k = T.add(keys, k_pe)
            attn = self._attention(f"{pre}.cross_t2i", q, k, keys, cfg.decoder_heads)
            queries = self._norm(f"{pre}.norm2", T.add(queries, attn))
            queries = self._norm(f"{pre}.norm3", T.add(queries, self._mlp(f"{pre}.mlp", queries, act=T.relu)))
            q = T.add(queries, q_pe)
            k = T.add(keys, k_pe)
            attn = self._attention(f"{pre}.cross_i2t", k, q, queries, cfg.decoder_heads)
            keys = self._norm(f"{pre}.norm4", T.add(keys, attn))

        q = T.add(queries, q_pe)
        k = T.add(keys, k_pe)
        attn = self._attention("dec.final_attn", q, k, keys, cfg.decoder_heads)
        queries = self._norm("dec.norm_final", T.add(queries, attn))

        grid = T.transpose(T.reshape(keys, (s, s, d)), (2, 0, 1))
        u = T.upsample_2x(grid, self._p("up.0.weight"), self._p("up.0.bias"))
        u = T.gelu(self._norm2d("up.ln", u))
        u = T.gelu(T.upsample_2x(u, self._p("up.1.weight"), self._p("up.1.bias")))
        r = cfg.mask_res
        flat = T.reshape(u, (d // 8, r * r))

        rows = []
        for m in range(cfg.num_mask_tokens):
            h = T.relu(T.add(T.matmul(queries[1 + m : 2 + m], self._p(f"hyper.{m}.w1")), self._p(f"hyper.{m}.b1")))
            h = T.relu(T.add(T.matmul(h, self._p(f"hyper.{m}.w2")), self._p(f"hyper.{m}.b2")))
            rows.append(T.add(T.matmul(h, self._p(f"hyper.{m}.w3")), self._p(f"hyper.{m}.b3")))
        hyper = T.concat(rows, axis=0)
        mask_logits = T.reshape(T.matmul(hyper, flat), (cfg.num_mask_tokens, r, r))

        h = T.relu(T.add(T.matmul(queries[0:1], self._p("iou_head.w1")), self._p("iou_head.b1")))
        h = T.relu(T.add(T.matmul(h, self._p("iou_head.w2")), self._p("iou_head.b2")))
        iou = T.sigmoid(T.reshape(T.add(T.matmul(h, self._p("iou_head.w3")), self._p("iou_head.b3")), (cfg.num_mask_tokens,)))
        return MaskPrediction(mask_logits=mask_logits, iou_pred=iou, best_index=int(np.argmax(iou.data)))

    # ------------------------------------------------------------------
    # end-to-end inference

    def preprocess(self, pixels: np.ndarray) -> tuple[np.ndarray, float, float, tuple[int, int]]:
        """Resize longest side to the model input and pad square.

        Returns (padded pixels, sx, sy, (new_h, new_w)); prompt coordinates map
        into model space as x*sx, y*sy.
        """
        pixels = np.asarray(pixels, dtype=np.float32)
        h, w = pixels.shape
        new_h, new_w = resize_longest_extents(h, w, self.config.image_size)
        resized = bilinear_resize(pixels, new_h, new_w)
        padded = pad_to_square(resized, self.config.image_size)
        return padded, new_w / w, new_h / h, (new_h, new_w)

    def _map_prompt(self, p: Prompt, sx: float, sy: float) -> Prompt:
        if isinstance(p, Point):
            return Point(x=p.x * sx, y=p.y * sy)
        return Box(x1=p.x1 * sx, y1=p.y1 * sy, x2=p.x2 * sx, y2=p.y2 * sy)

    def _logits_to_original(self, logits: np.ndarray, input_hw: tuple[int, int], orig_hw: tuple[int, int]) -> np.ndarray:
        size = self.config.image_size
        up = bilinear_resize(logits, size, size)
        up = up[: input_hw[0], : input_hw[1]]
        return bilinear_resize(up, orig_hw[0], orig_hw[1])

    def predict_candidates(
        self,
        pixels: np.ndarray | None,
        prompts: list[Prompt],
        multimask: bool = True,
        refine_steps: int = 1,
        image_emb: Tensor | None = None,
        geometry: tuple[float, float, tuple[int, int], tuple[int, int]] | None = None,
    ) -> tuple[list[np.ndarray], list[float], int]:
        """Run the full pipeline; returns per-candidate original-resolution masks.

        With `image_emb` plus `geometry` = (sx, sy, input_hw, orig_hw) supplied
        (the encode-once service path) the encoder is not run and `pixels` is
        ignored.
        """
        with T.no_grad():
            if image_emb is None:
                orig_hw = np.asarray(pixels).shape
                padded, sx, sy, input_hw = self.preprocess(pixels)
                image_emb = self.encode_image(padded)
            else:
                sx, sy, input_hw, orig_hw = geometry
            sparse = self.encode_prompts([self._map_prompt(p, sx, sy) for p in prompts])
            pred = self.decode(image_emb, sparse)
            for _ in range(max(0, int(refine_steps))):
                feed = pred.best_index if multimask else 0
                pred = self.decode(image_emb, sparse, pred.mask_logits[feed])
        if multimask:
            indices = list(range(self.config.num_mask_tokens))
            best = pred.best_index
        else:
            indices = [0]
            best = 0
        masks = [self._logits_to_original(pred.mask_logits.data[i], input_hw, orig_hw) > 0 for i in indices]
        ious = [float(pred.iou_pred.data[i]) for i in indices]
        return masks, ious, indices.index(best)

    def predict(self, pixels: np.ndarray, prompts: list[Prompt], multimask: bool = True, refine_steps: int = 1) -> tuple[np.ndarray, float]:
        """Best mask at original resolution plus its predicted IoU."""
        masks, ious, best = self.predict_candidates(pixels, prompts, multimask=multimask, refine_steps=refine_steps)
        return masks[best], ious[best]

    def classify(self, pixels: np.ndarray) -> Tensor:
        """Mean-pooled encoder tokens through the linear classification head."""
        if self.config.n_classes is None:
            raise ValueError("classify: model has no classification head configured")
        if np.asarray(pixels).shape != (self.config.image_size, self.config.image_size):
            padded, _, _, _ = self.preprocess(pixels)
        else:
            padded = pixels
        tokens = self.encode_tokens(padded)
        pooled = T.reshape(T.tmean(tokens, axis=0), (1, self.config.embed_dim))
        return T.reshape(T.add(T.matmul(pooled, self._p("cls.weight")), self._p("cls.bias")), (self.config.n_classes,))
