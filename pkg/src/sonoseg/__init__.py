"""Promptable ultrasound segmentation toolkit."""

from .coco import CocoDataset, ImageRecord, InstanceAnnotation, parse_coco, write_coco
from .model import MaskPrediction, ModelConfig, PromptModel, toy_config
from .prompts import Box, Point, Prompt
from .rle import Rle, rle_decode, rle_encode, tight_bbox
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "CocoDataset",
    "ImageRecord",
    "InstanceAnnotation",
    "parse_coco",
    "write_coco",
    "MaskPrediction",
    "ModelConfig",
    "PromptModel",
    "toy_config",
    "Box",
    "Point",
    "Prompt",
    "Rle",
    "rle_decode",
    "rle_encode",
    "tight_bbox",
    "Tensor",
    "__version__",
]
