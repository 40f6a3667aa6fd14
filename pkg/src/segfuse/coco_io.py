"""COCO-style JSON interchange for datasets and per-model result files."""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Union

from .core import (
    BBox,
    Dataset,
    ImageRecord,
    Instance,
    MaskError,
    SegMask,
    bbox_from_mask,
    polygons_to_mask,
)

Grouped = Dict[int, List[Instance]]
PathLike = Union[str, Path]

_DECIMALS = 6


class LoadError(ValueError):
    """A dataset or result file could not be parsed; the message names the record."""


def _num(x: float):
    x = float(x)
    r = round(x, _DECIMALS)
    return int(r) if r.is_integer() else r


def _parse_bbox(raw, where: str) -> BBox:
    try:
        x, y, w, h = (float(v) for v in raw)
        return BBox(x, y, w, h)
    except (TypeError, ValueError) as exc:
        raise LoadError(f"{where}: bad bbox {raw!r} ({exc})") from None


def _parse_segmentation(seg, height: int, width: int, where: str) -> SegMask:
    try:
        if isinstance(seg, list):
            return polygons_to_mask(seg, height, width)
        if isinstance(seg, dict):
            counts = seg.get("counts")
            if isinstance(counts, str):
                raise LoadError(f"{where}: compressed string RLE is not supported")
            size = seg.get("size")
            if size is None or counts is None:
                raise LoadError(f"{where}: segmentation needs 'size' and 'counts'")
            h, w = int(size[0]), int(size[1])
            if (h, w) != (height, width):
                raise LoadError(f"{where}: mask size {[h, w]} != image size {[height, width]}")
            return SegMask(h, w, tuple(counts))
    except MaskError as exc:
        raise LoadError(f"{where}: malformed mask ({exc})") from None
    raise LoadError(f"{where}: unrecognised segmentation {type(seg).__name__}")


def _read_json(path: PathLike):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _sort_key(inst: Instance):
    counts = inst.mask.counts if inst.mask is not None else ()
    return (-inst.score, inst.category_id, tuple(inst.bbox.as_list()), counts)


def parse_dataset(data: Mapping) -> Dataset:
    if not isinstance(data, Mapping):
        raise LoadError("dataset JSON must be an object")
    for key in ("images", "annotations", "categories"):
        if key not in data:
            raise LoadError(f"missing {key} section")

    images = []
    for raw in data["images"]:
        try:
            images.append(
                ImageRecord(int(raw["id"]), int(raw["width"]), int(raw["height"]),
                            str(raw.get("file_name", "")))
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise LoadError(f"image {raw.get('id', '?')!r}: {exc}") from None
    by_id = {im.id: im for im in images}
    if len(by_id) != len(images):
        raise LoadError("duplicate image ids")

    categories = []
    for raw in data["categories"]:
        try:
            categories.append((int(raw["id"]), str(raw.get("name", raw["id"]))))
        except (KeyError, TypeError, ValueError) as exc:
            raise LoadError(f"category {raw!r}: {exc}") from None
    cat_ids = {c for c, _ in categories}

    annotations = []
    for raw in data["annotations"]:
        where = f"annotation {raw.get('id', '?')}"
        if raw.get("iscrowd", 0):
            raise LoadError(f"{where}: iscrowd annotations are not supported")
        try:
            image_id, cat_id = int(raw["image_id"]), int(raw["category_id"])
        except (KeyError, TypeError, ValueError) as exc:
            raise LoadError(f"{where}: {exc}") from None
        if image_id not in by_id:
            raise LoadError(f"{where}: unknown image_id {image_id}")
        if cat_id not in cat_ids:
            raise LoadError(f"{where}: unknown category_id {cat_id}")
        im = by_id[image_id]
        mask = None
        if raw.get("segmentation") is not None:
            mask = _parse_segmentation(raw["segmentation"], im.height, im.width, where)
        if "bbox" in raw:
            bbox = _parse_bbox(raw["bbox"], where)
        elif mask is not None:
            bbox = bbox_from_mask(mask)
        else:
            raise LoadError(f"{where}: needs bbox or segmentation")
        area = float(raw["area"]) if "area" in raw else -1.0
        annotations.append(
            Instance(image_id, cat_id, bbox, mask, None, int(raw["id"]) if "id" in raw else None, area)
        )

    try:
        return Dataset(
            sorted(images, key=lambda im: im.id),
            sorted(annotations, key=lambda a: (a.id is None, a.id or 0, a.image_id)),
            sorted(categories),
        )
    except ValueError as exc:
        raise LoadError(str(exc)) from None


def load_dataset(path: PathLike) -> Dataset:
    return parse_dataset(_read_json(path))


def dataset_to_dict(dataset: Dataset) -> Dict:
    anns = []
    for a in dataset.annotations:
        entry = {
            "id": a.id,
            "image_id": a.image_id,
            "category_id": a.category_id,
            "bbox": [_num(v) for v in a.bbox.as_list()],
            "area": _num(a.area),
            "iscrowd": 0,
        }
        if a.mask is not None:
            entry["segmentation"] = a.mask.to_dict()
        anns.append(entry)
    return {
        "images": [
            {"id": im.id, "width": im.width, "height": im.height, "file_name": im.file_name}
            for im in dataset.images
        ],
        "annotations": anns,
        "categories": [{"id": c, "name": n} for c, n in dataset.categories],
    }


def write_dataset(dataset: Dataset, path: PathLike) -> None:
    _write_json(dataset_to_dict(dataset), path)


def parse_results(entries, dataset: Dataset) -> Grouped:
    """Group result entries per image (every dataset image present), best score first."""
    if not isinstance(entries, list):
        raise LoadError("results JSON must be an array")
    images = {im.id: im for im in dataset.images}
    cat_ids = set(dataset.category_ids)
    grouped: Grouped = {i: [] for i in sorted(images)}
    for n, raw in enumerate(entries):
        where = f"result #{n}"
        try:
            image_id, cat_id = int(raw["image_id"]), int(raw["category_id"])
            score = float(raw["score"])
        except (KeyError, TypeError, ValueError) as exc:
            raise LoadError(f"{where}: {exc}") from None
        if image_id not in images:
            raise LoadError(f"{where}: unknown image_id {image_id}")
        if cat_id not in cat_ids:
            raise LoadError(f"{where}: unknown category_id {cat_id}")
        if not math.isfinite(score) or not 0.0 <= score <= 1.0:
            raise LoadError(f"{where}: score {score} outside [0, 1]")
        if "bbox" not in raw:
            raise LoadError(f"{where}: missing bbox")
        im = images[image_id]
        bbox = _parse_bbox(raw["bbox"], where)
        mask = None
        if raw.get("segmentation") is not None:
            mask = _parse_segmentation(raw["segmentation"], im.height, im.width, where)
        grouped[image_id].append(Instance(image_id, cat_id, bbox, mask, score))
    for dets in grouped.values():
        dets.sort(key=_sort_key)
    return grouped


def load_results(path: PathLike, dataset: Dataset) -> Grouped:
    return parse_results(_read_json(path), dataset)


def results_to_list(predictions: Union[Mapping[int, Iterable[Instance]], Iterable[Instance]]) -> List[Dict]:
    if isinstance(predictions, Mapping):
        flat = [d for i in sorted(predictions) for d in predictions[i]]
    else:
        flat = list(predictions)
    out = []
    for d in flat:
        entry = {
            "image_id": d.image_id,
            "category_id": d.category_id,
            "bbox": [_num(v) for v in d.bbox.as_list()],
            "score": _num(d.score if d.score is not None else 1.0),
        }
        if d.mask is not None:
            entry["segmentation"] = d.mask.to_dict()
        out.append(entry)
    return out


def write_results(predictions, path: PathLike) -> None:
    _write_json(results_to_list(predictions), path)


def _write_json(obj, path: PathLike) -> None:
    text = json.dumps(obj, separators=(",", ":"))
    Path(path).write_text(text + "\n", encoding="utf-8")
