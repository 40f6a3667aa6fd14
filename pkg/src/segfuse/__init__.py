"""Evaluation, greedy multi-model fusion and confusion-guided mixup for
instance segmentation results."""

__version__ = "0.1.0"

from .ap_eval import ApReport, EvalAccumulator, EvalConfig, average_precision, evaluate, match_detections
from .confusion import ConfusionConfig, ConfusionMatrix, build_confusion, guided_pairs
from .core import (
    BBox,
    Dataset,
    ImageRecord,
    Instance,
    SegMask,
    bbox_from_mask,
    box_iou,
    mask_iou,
    rle_decode,
    rle_encode,
)
from .fusion import FusionTrace, PseudoGroundTruth, filter_controller, fuse, fuse_trace_verify

__all__ = [
    "ApReport",
    "BBox",
    "ConfusionConfig",
    "ConfusionMatrix",
    "Dataset",
    "EvalAccumulator",
    "EvalConfig",
    "FusionTrace",
    "ImageRecord",
    "Instance",
    "PseudoGroundTruth",
    "SegMask",
    "average_precision",
    "bbox_from_mask",
    "box_iou",
    "build_confusion",
    "evaluate",
    "filter_controller",
    "fuse",
    "fuse_trace_verify",
    "guided_pairs",
    "mask_iou",
    "match_detections",
    "rle_decode",
    "rle_encode",
]
