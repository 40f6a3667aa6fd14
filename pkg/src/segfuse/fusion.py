"""Greedy multi-model fusion guided by controller pseudo ground truths.

Images are visited in ascending id order. For image ``i`` every model's
predictions are tried on top of the results accepted so far, scored by box
AP against the pseudo ground truth of images ``1..i``; the best model's
predictions (masks included, unmodified) are kept. Ties go to the smallest
model index, and an undefined AP (no pseudo GT yet) counts as 0.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from .ap_eval import EvalAccumulator, EvalConfig, evaluate
from .core import Instance

Grouped = Dict[int, List[Instance]]

DEFAULT_TAU = 0.5
_AP_TOL = 1e-12


@dataclass
class PseudoGroundTruth:
    boxes: Dict[int, List[Instance]]
    tau: float

    @property
    def image_ids(self) -> List[int]:
        return sorted(self.boxes)


@dataclass
class FusionTrace:
    image_order: List[int] = field(default_factory=list)
    chosen_model: List[int] = field(default_factory=list)
    prefix_ap: List[Optional[float]] = field(default_factory=list)
    ap_evaluations: int = 0

    def to_dict(self) -> Dict:
        return {
            "image_order": list(self.image_order),
            "chosen_model": list(self.chosen_model),
            "prefix_ap": list(self.prefix_ap),
            "ap_evaluations": self.ap_evaluations,
        }


@dataclass
class VerificationReport:
    checked_steps: int = 0
    violations: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def filter_controller(controller_dets: Mapping[int, Sequence[Instance]], tau: float = DEFAULT_TAU) -> PseudoGroundTruth:
    """Keep controller detections with score >= tau as score-less pseudo GT."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    boxes = {}
    for image_id in sorted(controller_dets):
        boxes[image_id] = [
            replace(d, score=None, mask=None, area=-1.0)
            for d in controller_dets[image_id]
            if d.score is not None and d.score >= tau
        ]
    return PseudoGroundTruth(boxes, tau)


def _agnostic(instances: Sequence[Instance]) -> List[Instance]:
    return [replace(x, category_id=0) for x in instances]


def _box_config(config: Optional[EvalConfig]) -> EvalConfig:
    config = config or EvalConfig()
    return config if config.mode == "box" else replace(config, mode="box")


def _validate(ins: Sequence[Mapping[int, Sequence[Instance]]], pseudo: PseudoGroundTruth) -> None:
    if len(ins) == 0:
        raise ValueError("fusion needs at least one model")
    for k, model in enumerate(ins):
        missing = [i for i in pseudo.image_ids if i not in model]
        if missing:
            raise ValueError(f"model {k} has no prediction list for images {missing[:5]}")
        for image_id, dets in model.items():
            for d in dets:
                if d.score is None or not math.isfinite(d.score):
                    raise ValueError(f"model {k}, image {image_id}: non-finite score {d.score!r}")


def _score(report_ap: Optional[float]) -> float:
    return 0.0 if report_ap is None else report_ap


def fuse(
    ins: Sequence[Mapping[int, Sequence[Instance]]],
    pseudo: PseudoGroundTruth,
    config: Optional[EvalConfig] = None,
    class_agnostic: bool = False,
    workers: Optional[int] = None,
) -> Tuple[Grouped, FusionTrace]:
    """Select one model's predictions per image, greedily maximizing box AP.

    ``ins[k][image_id]`` holds model ``k``'s predictions. Model indices in the
    trace are 0-based.
    """
    _validate(ins, pseudo)
    config = _box_config(config)
    view = _agnostic if class_agnostic else list

    acc = EvalAccumulator(config)
    fused: Grouped = {}
    trace = FusionTrace()
    pool = ThreadPoolExecutor(workers) if workers and workers > 1 and len(ins) > 1 else None

    def candidate(args):
        image_id, gts, k = args
        trial = acc.clone()
        trial.add_image(image_id, gts, view(ins[k][image_id]))
        return trial, _score(trial.ap().ap)

    try:
        for image_id in pseudo.image_ids:
            gts = view(pseudo.boxes[image_id])
            jobs = [(image_id, gts, k) for k in range(len(ins))]
            results = list(pool.map(candidate, jobs)) if pool else [candidate(j) for j in jobs]
            trace.ap_evaluations += len(results)
            best = 0
            for k in range(1, len(results)):
                # APs closer than _AP_TOL count as a tie
                if results[k][1] > results[best][1] + _AP_TOL:
                    best = k
            acc = results[best][0]
            fused[image_id] = list(ins[best][image_id])
            trace.image_order.append(image_id)
            trace.chosen_model.append(best)
            trace.prefix_ap.append(acc.ap().ap)
    finally:
        if pool:
            pool.shutdown()
    return fused, trace


def fuse_trace_verify(
    ins: Sequence[Mapping[int, Sequence[Instance]]],
    pseudo: PseudoGroundTruth,
    trace: FusionTrace,
    config: Optional[EvalConfig] = None,
    class_agnostic: bool = False,
) -> VerificationReport:
    """Recheck every greedy step from scratch with batch evaluation."""
    config = _box_config(config)
    view = _agnostic if class_agnostic else list
    report = VerificationReport()
    order = pseudo.image_ids
    if trace.image_order and list(trace.image_order) != order:
        report.violations.append("image order differs from ascending pseudo GT ids")
    if len(trace.chosen_model) != len(order):
        report.violations.append(
            f"trace has {len(trace.chosen_model)} choices for {len(order)} images"
        )
        return report
    expected_evals = len(order) * len(ins)
    if trace.ap_evaluations != expected_evals:
        report.violations.append(
            f"ap_evaluations={trace.ap_evaluations}, expected {expected_evals}"
        )

    res: Grouped = {}
    prefix_gt: Grouped = {}
    for step, image_id in enumerate(order):
        prefix_gt[image_id] = view(pseudo.boxes[image_id])
        chosen = trace.chosen_model[step]
        if not 0 <= chosen < len(ins):
            report.violations.append(f"image {image_id}: chosen model {chosen} out of range")
            return report
        aps = []
        for k in range(len(ins)):
            dets = dict(res)
            dets[image_id] = view(ins[k][image_id])
            aps.append(_score(evaluate(prefix_gt, dets, config).ap))
        for k, ap_k in enumerate(aps):
            if ap_k > aps[chosen] + _AP_TOL:
                report.violations.append(
                    f"image {image_id}: model {k} AP {ap_k:.12g} beats chosen {chosen} AP {aps[chosen]:.12g}"
                )
            elif k < chosen and abs(ap_k - aps[chosen]) <= _AP_TOL:
                report.violations.append(
                    f"image {image_id}: tie with smaller index {k} not preferred over {chosen}"
                )
        res[image_id] = view(ins[chosen][image_id])
        report.checked_steps += 1
    return report
