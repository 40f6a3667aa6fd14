"""Score-weighted category confusion matrix and strongly-confused category pairs."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from .core import Dataset, Instance, box_iou_matrix, mask_iou_matrix

DEFAULT_ALPHA = 0.5
DEFAULT_BETA = 0.2


@dataclass(frozen=True)
class ConfusionConfig:
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    matching_mode: str = "box"

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")
        if self.matching_mode not in ("box", "mask"):
            raise ValueError(f"matching_mode must be 'box' or 'mask', got {self.matching_mode!r}")


@dataclass
class ConfusionMatrix:
    """``c[i, j]``: share of confidence mass predicted as ``category_ids[j]``
    for ground truths of ``category_ids[i]``. Rows with no matches stay zero."""

    category_ids: List[int]
    c: np.ndarray
    row_totals: np.ndarray

    def index(self, category_id: int) -> int:
        return self.category_ids.index(category_id)

    def entry(self, gt_category: int, pred_category: int) -> float:
        return float(self.c[self.index(gt_category), self.index(pred_category)])

    def to_dict(self) -> Dict:
        return {
            "category_ids": list(self.category_ids),
            "matrix": self.c.tolist(),
            "row_totals": self.row_totals.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ConfusionMatrix":
        ids = [int(c) for c in data["category_ids"]]
        c = np.asarray(data["matrix"], dtype=np.float64).reshape(len(ids), len(ids))
        totals = np.asarray(data.get("row_totals", c.sum(axis=1)), dtype=np.float64)
        return cls(ids, c, totals)


GuidedPairs = Set[Tuple[int, int]]


def build_confusion(
    gt: Dataset,
    preds: Mapping[int, Sequence[Instance]],
    config: Optional[ConfusionConfig] = None,
) -> ConfusionMatrix:
    """Every prediction adds its score to row ``g.category`` for each GT ``g``
    on the same image with IoU strictly above alpha; rows are then normalized."""
    config = config or ConfusionConfig()
    ids = gt.category_ids
    pos = {c: i for i, c in enumerate(ids)}
    raw = np.zeros((len(ids), len(ids)))
    gts = gt.grouped()
    for image_id in sorted(preds):
        if image_id not in gts:
            raise ValueError(f"predictions reference unknown image {image_id}")
        dets, truths = list(preds[image_id]), gts[image_id]
        if not dets or not truths:
            continue
        if config.matching_mode == "mask":
            if any(x.mask is None for x in dets + truths):
                raise ValueError("mask matching requires masks on predictions and ground truths")
            ious = mask_iou_matrix([d.mask for d in dets], [g.mask for g in truths])
        else:
            ious = box_iou_matrix([d.bbox for d in dets], [g.bbox for g in truths])
        for di, gi in zip(*np.nonzero(ious > config.alpha)):
            d = dets[di]
            if d.score is None:
                raise ValueError(f"prediction on image {image_id} lacks a score")
            raw[pos[truths[gi].category_id], pos[d.category_id]] += d.score
    totals = raw.sum(axis=1)
    c = np.divide(raw, totals[:, None], out=np.zeros_like(raw), where=totals[:, None] > 0)
    return ConfusionMatrix(list(ids), c, totals)


def guided_pairs(matrix: ConfusionMatrix, beta: float = DEFAULT_BETA) -> GuidedPairs:
    """Ordered off-diagonal category pairs ``(i, j)`` with ``C[i][j] > beta``."""
    rows, cols = np.nonzero(matrix.c > beta)
    ids = matrix.category_ids
    return {(ids[r], ids[k]) for r, k in zip(rows, cols) if r != k}


def pairs_to_list(pairs: GuidedPairs) -> List[List[int]]:
    return [[i, j] for i, j in sorted(pairs)]
