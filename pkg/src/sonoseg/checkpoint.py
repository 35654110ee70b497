"""Binary checkpoint format for the prompt model.

Layout (all integers little-endian):
  magic  8 bytes  "USAMCKPT"
  version u32
  config  u32 length + UTF-8 JSON
  then per parameter, in sorted name order:
    name   u32 length + UTF-8 bytes
    rank   u32
    extent u64 × rank
    data   raw float32, row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import FROZEN_PARAMS, ModelConfig, PromptModel
from .tensor import Tensor

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "MAGIC", "VERSION"]

MAGIC = b"USAMCKPT"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated, or inconsistent checkpoint file."""


def save_checkpoint(model: PromptModel, path) -> None:
    config_blob = json.dumps(model.config.to_json(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(config_blob)))
        f.write(config_blob)
        for name in sorted(model.params):
            data = np.ascontiguousarray(model.params[name].data, dtype=np.float32)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            f.write(data.tobytes())


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {self.pos}, have {len(self.blob) - self.pos}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def done(self) -> bool:
        return self.pos == len(self.blob)


def load_checkpoint(path) -> PromptModel:
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    magic = r.take(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}: not a checkpoint (expected {MAGIC!r})")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    try:
        config = ModelConfig.from_json(json.loads(r.take(r.u32()).decode("utf-8")))
    except (json.JSONDecodeError, TypeError, ValueError) as e:
        raise CheckpointError(f"bad config block: {e}") from None

    params: dict[str, Tensor] = {}
    while not r.done():
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).copy()
        params[name] = Tensor(data, requires_grad=name not in FROZEN_PARAMS)

    expected = PromptModel.initialize(config, seed=0)
    missing = sorted(set(expected.params) - set(params))
    if missing:
        raise CheckpointError(f"missing parameter {missing[0]!r} (and {len(missing) - 1} more)" if len(missing) > 1 else f"missing parameter {missing[0]!r}")
    extra = sorted(set(params) - set(expected.params))
    if extra:
        raise CheckpointError(f"unexpected parameter {extra[0]!r}")
    for name, ref in expected.params.items():
        if params[name].shape != ref.shape:
            raise CheckpointError(f"parameter {name!r} has shape {params[name].shape}, config implies {ref.shape}")
    return PromptModel(config, params)
