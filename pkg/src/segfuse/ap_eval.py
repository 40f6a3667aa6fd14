"""COCO-style Average Precision for boxes and masks.

Ranking across images uses the key (score desc, image id asc, rank within
image asc), so results do not depend on the order images are supplied in.
Recall thresholds ``j / (R - 1)`` are compared in exact integer arithmetic.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .core import Dataset, Instance, box_iou_matrix, mask_iou_matrix

DEFAULT_IOU_THRESHOLDS: Tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))

GroundTruth = Union[Dataset, Mapping[int, Sequence[Instance]]]


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: Tuple[float, ...] = DEFAULT_IOU_THRESHOLDS
    recall_points: int = 101
    max_dets_per_image: int = 100
    mode: str = "box"

    def __post_init__(self):
        t = tuple(float(v) for v in self.iou_thresholds)
        object.__setattr__(self, "iou_thresholds", t)
        if not t or any(not 0.0 < v <= 1.0 for v in t) or any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError(f"IoU thresholds must be strictly increasing in (0, 1]: {t}")
        if self.recall_points < 2:
            raise ValueError("recall_points must be >= 2")
        if self.max_dets_per_image < 1:
            raise ValueError("max_dets_per_image must be >= 1")
        if self.mode not in ("box", "mask"):
            raise ValueError(f"mode must be 'box' or 'mask', got {self.mode!r}")

    def threshold_index(self, t: float) -> Optional[int]:
        for i, v in enumerate(self.iou_thresholds):
            if abs(v - t) < 1e-9:
                return i
        return None


@dataclass
class ApReport:
    """AP summary. ``None`` marks an undefined value (no ground truth at all)."""

    ap: Optional[float]
    ap50: Optional[float]
    ap75: Optional[float]
    per_category: Dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "ap": self.ap,
            "ap50": self.ap50,
            "ap75": self.ap75,
            "per_category": {str(k): v for k, v in sorted(self.per_category.items())},
        }


# --------------------------------------------------------------------------
# matching


def _iou_matrix(dets: Sequence[Instance], gts: Sequence[Instance], mode: str) -> np.ndarray:
    if mode == "box":
        return box_iou_matrix([d.bbox for d in dets], [g.bbox for g in gts])
    if any(x.mask is None for x in dets) or any(x.mask is None for x in gts):
        raise ValueError("mask mode requires masks on every detection and ground truth")
    return mask_iou_matrix([d.mask for d in dets], [g.mask for g in gts])


def _greedy_match(ious: np.ndarray, threshold: float) -> np.ndarray:
    """Index of the matched GT per detection (rows in score order), -1 if none."""
    n_det, n_gt = ious.shape
    taken = np.zeros(n_gt, dtype=bool)
    out = np.full(n_det, -1, dtype=np.int64)
    if n_gt == 0:
        return out
    for d in range(n_det):
        cand = np.where(taken, -1.0, ious[d])
        g = int(np.argmax(cand))
        if cand[g] >= threshold:
            out[d] = g
            taken[g] = True
    return out


def match_detections(
    dets: Sequence[Instance],
    gts: Sequence[Instance],
    iou_threshold: float,
    mode: str = "box",
) -> Tuple[List[bool], Dict[int, int]]:
    """Greedy matching of score-sorted detections against ground truths.

    Returns one TP flag per detection and a map detection index -> GT index.
    GTs left out of the map are false negatives.
    """
    scores = [d.score for d in dets]
    if any(b > a for a, b in zip(scores, scores[1:])):
        raise ValueError("detections must be sorted by descending score")
    match = _greedy_match(_iou_matrix(dets, gts, mode), iou_threshold)
    flags = [bool(m >= 0) for m in match]
    return flags, {d: int(g) for d, g in enumerate(match) if g >= 0}


def average_precision(flags: Sequence[bool], n_gt: int, recall_points: int = 101) -> Optional[float]:
    """Interpolated AP of a score-ordered TP/FP sequence; None when ``n_gt`` is 0."""
    if n_gt == 0:
        return None
    row = _ap_rows(np.asarray(flags, dtype=bool).reshape(1, -1), n_gt, recall_points)
    return float(row[0])


def _ap_rows(tps: np.ndarray, n_gt: int, recall_points: int) -> np.ndarray:
    n_thr, n_det = tps.shape
    if n_det == 0:
        return np.zeros(n_thr)
    tp = np.cumsum(tps, axis=1, dtype=np.int64)
    precision = tp / np.arange(1, n_det + 1)
    # interpolated precision: best precision at any equal-or-higher recall
    precision = np.maximum.accumulate(precision[:, ::-1], axis=1)[:, ::-1]
    targets = np.arange(recall_points, dtype=np.int64) * n_gt
    scaled = tp * (recall_points - 1)
    out = np.empty(n_thr)
    for t in range(n_thr):
        idx = np.searchsorted(scaled[t], targets, side="left")
        hit = idx < n_det
        out[t] = precision[t, idx[hit]].sum() / recall_points
    return out


# --------------------------------------------------------------------------
# per-image records


@dataclass(frozen=True)
class _Records:
    """Score-ordered match results of one category; arrays are never mutated."""

    n_gt: int
    scores: np.ndarray
    image_ids: np.ndarray
    ranks: np.ndarray
    tps: np.ndarray  # (thresholds, detections)

    @classmethod
    def empty(cls, n_thr: int) -> "_Records":
        z = np.zeros(0)
        return cls(0, z, z.astype(np.int64), z.astype(np.int64), np.zeros((n_thr, 0), dtype=bool))

    @staticmethod
    def concat(parts: Sequence["_Records"]) -> "_Records":
        scores = np.concatenate([p.scores for p in parts])
        image_ids = np.concatenate([p.image_ids for p in parts])
        ranks = np.concatenate([p.ranks for p in parts])
        tps = np.concatenate([p.tps for p in parts], axis=1)
        order = np.lexsort((ranks, image_ids, -scores))
        return _Records(
            sum(p.n_gt for p in parts), scores[order], image_ids[order], ranks[order], tps[:, order]
        )


def _check_image(dets: Sequence[Instance], gts: Sequence[Instance], image_id: int) -> None:
    for x in list(dets) + list(gts):
        if x.image_id != image_id:
            raise ValueError(f"instance of image {x.image_id} supplied for image {image_id}")
    for d in dets:
        if d.score is None or not np.isfinite(d.score):
            raise ValueError(f"detection on image {image_id} has invalid score {d.score!r}")


def _image_records(
    image_id: int, gts: Sequence[Instance], dets: Sequence[Instance], config: EvalConfig
) -> Dict[int, _Records]:
    _check_image(dets, gts, image_id)
    order = sorted(range(len(dets)), key=lambda k: -dets[k].score)[: config.max_dets_per_image]
    ranked = [(rank, dets[k]) for rank, k in enumerate(order)]
    cats = sorted({g.category_id for g in gts} | {d.category_id for _, d in ranked})
    out = {}
    for c in cats:
        cg = [g for g in gts if g.category_id == c]
        cd = [(r, d) for r, d in ranked if d.category_id == c]
        ious = _iou_matrix([d for _, d in cd], cg, config.mode)
        tps = np.zeros((len(config.iou_thresholds), len(cd)), dtype=bool)
        for t, thr in enumerate(config.iou_thresholds):
            tps[t] = _greedy_match(ious, thr) >= 0
        out[c] = _Records(
            len(cg),
            np.array([d.score for _, d in cd], dtype=np.float64),
            np.full(len(cd), image_id, dtype=np.int64),
            np.array([r for r, _ in cd], dtype=np.int64),
            tps,
        )
    return out


def _report(rows: Mapping[int, Optional[np.ndarray]], config: EvalConfig) -> ApReport:
    defined = {c: r for c, r in sorted(rows.items()) if r is not None}
    if not defined:
        return ApReport(None, None, None, {})
    per_cat = {c: float(r.mean()) for c, r in defined.items()}
    ap = float(np.mean(list(per_cat.values())))

    def at(t):
        i = config.threshold_index(t)
        if i is None:
            return None
        return float(np.mean([r[i] for r in defined.values()]))

    return ApReport(ap, at(0.5), at(0.75), per_cat)


def _gt_groups(gt: GroundTruth) -> Dict[int, List[Instance]]:
    if isinstance(gt, Dataset):
        return gt.grouped()
    return {int(k): list(v) for k, v in gt.items()}


def evaluate(
    gt: GroundTruth,
    dets: Mapping[int, Sequence[Instance]],
    config: Optional[EvalConfig] = None,
) -> ApReport:
    """Batch AP over every image of ``gt``."""
    config = config or EvalConfig()
    gts = _gt_groups(gt)
    unknown = set(dets) - set(gts)
    if unknown:
        raise ValueError(f"detections reference unknown images {sorted(unknown)[:5]}")
    per_cat: Dict[int, List[_Records]] = {}
    for image_id in sorted(gts):
        recs = _image_records(image_id, gts[image_id], dets.get(image_id, ()), config)
        for c, r in recs.items():
            per_cat.setdefault(c, []).append(r)
    rows = {}
    for c, parts in per_cat.items():
        merged = _Records.concat(parts)
        rows[c] = _ap_rows(merged.tps, merged.n_gt, config.recall_points) if merged.n_gt else None
    return _report(rows, config)


# --------------------------------------------------------------------------
# incremental accumulator


@dataclass(frozen=True)
class _CategoryState:
    records: _Records
    row: Optional[np.ndarray]


class EvalAccumulator:
    """Incremental AP over a growing set of images.

    ``clone`` is O(categories): per-category state is immutable and shared,
    and ``add_image`` replaces only the categories the new image touches.
    """

    def __init__(self, config: Optional[EvalConfig] = None):
        self.config = config or EvalConfig()
        self._cats: Dict[int, _CategoryState] = {}
        self._images: set = set()

    def clone(self) -> "EvalAccumulator":
        other = EvalAccumulator.__new__(EvalAccumulator)
        other.config = self.config
        other._cats = dict(self._cats)
        other._images = set(self._images)
        return other

    @property
    def image_ids(self) -> List[int]:
        return sorted(self._images)

    def add_image(self, image_id: int, gts: Sequence[Instance], dets: Sequence[Instance]) -> None:
        if image_id in self._images:
            raise ValueError(f"image {image_id} already added")
        recs = _image_records(image_id, gts, dets, self.config)
        self._images.add(image_id)
        n_thr = len(self.config.iou_thresholds)
        for c, new in recs.items():
            old = self._cats.get(c)
            base = old.records if old is not None else _Records.empty(n_thr)
            merged = _Records.concat([base, new])
            row = (
                _ap_rows(merged.tps, merged.n_gt, self.config.recall_points)
                if merged.n_gt
                else None
            )
            self._cats[c] = _CategoryState(merged, row)

    def ap(self) -> ApReport:
        return _report({c: s.row for c, s in self._cats.items()}, self.config)

    def __len__(self) -> int:
        return len(self._images)


def accumulator_add_image(
    acc: EvalAccumulator, image_id: int, gts: Sequence[Instance], dets: Sequence[Instance]
) -> EvalAccumulator:
    """Functional form: returns a new accumulator, leaving ``acc`` untouched."""
    out = acc.clone()
    out.add_image(image_id, gts, dets)
    return out


def accumulator_ap(acc: EvalAccumulator) -> ApReport:
    return acc.ap()
