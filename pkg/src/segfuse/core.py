"""Geometry and annotation primitives: boxes, RLE masks, instances, IoU."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np


class MaskError(ValueError):
    """Malformed run-length mask."""


class GridMismatchError(ValueError):
    """Two masks do not share a (height, width) grid."""


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.w < 0 or self.h < 0:
            raise ValueError(f"negative box size: {self}")

    def area(self) -> float:
        return self.w * self.h

    def as_list(self) -> List[float]:
        return [self.x, self.y, self.w, self.h]

    @classmethod
    def from_xyxy(cls, x0: float, y0: float, x1: float, y1: float) -> "BBox":
        return cls(x0, y0, max(0.0, x1 - x0), max(0.0, y1 - y0))


@dataclass(frozen=True)
class SegMask:
    """Binary mask stored as column-major run lengths, background first.

    Only the first run may be zero (mask whose first pixel is foreground).
    """

    height: int
    width: int
    counts: Tuple[int, ...]

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        object.__setattr__(self, "counts", counts)
        if self.height < 0 or self.width < 0:
            raise MaskError(f"negative mask size {self.height}x{self.width}")
        if any(c < 0 for c in counts):
            raise MaskError("negative run length")
        if sum(counts) != self.height * self.width:
            raise MaskError(
                f"run lengths sum to {sum(counts)}, expected {self.height * self.width}"
            )
        if any(c == 0 for c in counts[1:]):
            raise MaskError("zero-length run after the first position")

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.height, self.width)

    def area(self) -> int:
        return int(sum(self.counts[1::2]))

    def decode(self) -> np.ndarray:
        return rle_decode(self)

    def to_dict(self) -> Dict:
        return {"size": [self.height, self.width], "counts": list(self.counts)}


@dataclass(frozen=True)
class Instance:
    """One annotated or predicted object. ``score`` is None for ground truth."""

    image_id: int
    category_id: int
    bbox: BBox
    mask: Optional[SegMask] = None
    score: Optional[float] = None
    id: Optional[int] = None
    area: float = field(default=-1.0)

    def __post_init__(self):
        if self.area < 0:
            area = self.mask.area() if self.mask is not None else self.bbox.area()
            object.__setattr__(self, "area", float(area))

    @property
    def is_prediction(self) -> bool:
        return self.score is not None


@dataclass(frozen=True)
class ImageRecord:
    id: int
    width: int
    height: int
    file_name: str = ""

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image {self.id}: non-positive size {self.width}x{self.height}")


@dataclass
class Dataset:
    images: List[ImageRecord]
    annotations: List[Instance]
    categories: List[Tuple[int, str]]

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        image_ids = [im.id for im in self.images]
        if len(set(image_ids)) != len(image_ids):
            raise ValueError("duplicate image ids")
        cat_ids = [c for c, _ in self.categories]
        if len(set(cat_ids)) != len(cat_ids):
            raise ValueError("duplicate category ids")
        images = {im.id: im for im in self.images}
        cats = set(cat_ids)
        for ann in self.annotations:
            if ann.image_id not in images:
                raise ValueError(f"annotation {ann.id}: unknown image_id {ann.image_id}")
            if ann.category_id not in cats:
                raise ValueError(f"annotation {ann.id}: unknown category_id {ann.category_id}")
            im = images[ann.image_id]
            if ann.mask is not None and ann.mask.shape != (im.height, im.width):
                raise ValueError(
                    f"annotation {ann.id}: mask {ann.mask.shape} does not fit image "
                    f"{(im.height, im.width)}"
                )

    @property
    def image_ids(self) -> List[int]:
        return sorted(im.id for im in self.images)

    @property
    def category_ids(self) -> List[int]:
        return sorted(c for c, _ in self.categories)

    def image(self, image_id: int) -> ImageRecord:
        for im in self.images:
            if im.id == image_id:
                return im
        raise KeyError(image_id)

    def grouped(self) -> Dict[int, List[Instance]]:
        """Ground truths per image id; every image gets a (possibly empty) list."""
        out: Dict[int, List[Instance]] = {i: [] for i in self.image_ids}
        for ann in self.annotations:
            out[ann.image_id].append(ann)
        return out


# --------------------------------------------------------------------------
# RLE codec


def rle_encode(bitmask) -> SegMask:
    m = np.asarray(bitmask)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D grid, got shape {m.shape}")
    h, w = m.shape
    flat = (m.T.reshape(-1) != 0).astype(np.int8)
    if flat.size == 0:
        return SegMask(h, w, ())
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0] == 1:
        runs.insert(0, 0)
    return SegMask(h, w, tuple(runs))


def rle_decode(mask: SegMask) -> np.ndarray:
    h, w = mask.height, mask.width
    counts = np.asarray(mask.counts, dtype=np.int64)
    if counts.sum() != h * w:
        raise MaskError(f"run lengths sum to {counts.sum()}, expected {h * w}")
    values = np.arange(len(counts)) % 2 == 1
    flat = np.repeat(values, counts)
    return flat.reshape(w, h).T


def bbox_from_mask(mask: SegMask) -> BBox:
    m = rle_decode(mask)
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    if rows.size == 0:
        return BBox(0.0, 0.0, 0.0, 0.0)
    return BBox(
        float(cols[0]),
        float(rows[0]),
        float(cols[-1] - cols[0] + 1),
        float(rows[-1] - rows[0] + 1),
    )


def polygons_to_mask(polygons: Sequence[Sequence[float]], height: int, width: int) -> SegMask:
    """Rasterize flat [x0, y0, x1, y1, ...] rings with even-odd fill at pixel centres."""
    py, px = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    inside = np.zeros((height, width), dtype=bool)
    for poly in polygons:
        pts = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
        if len(pts) < 3:
            raise MaskError("polygon with fewer than 3 vertices")
        nxt = np.roll(pts, -1, axis=0)
        for (x0, y0), (x1, y1) in zip(pts, nxt):
            if y0 == y1:
                continue
            straddle = (y0 > py) != (y1 > py)
            x_cross = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
            inside ^= straddle & (px < x_cross)
    return rle_encode(inside)


# --------------------------------------------------------------------------
# IoU


def box_iou(a: BBox, b: BBox) -> float:
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    inter = max(0.0, iw) * max(0.0, ih)
    union = a.area() + b.area() - inter
    return inter / union if union > 0 else 0.0


def mask_iou(a: SegMask, b: SegMask) -> float:
    if a.shape != b.shape:
        raise GridMismatchError(f"mask grids differ: {a.shape} vs {b.shape}")
    ma, mb = rle_decode(a), rle_decode(b)
    union = np.count_nonzero(ma | mb)
    if union == 0:
        return 0.0
    return np.count_nonzero(ma & mb) / union


def box_iou_matrix(dets: Sequence[BBox], gts: Sequence[BBox]) -> np.ndarray:
    """Pairwise box IoU, shape (len(dets), len(gts))."""
    if not dets or not gts:
        return np.zeros((len(dets), len(gts)))
    d = np.array([b.as_list() for b in dets], dtype=np.float64)
    g = np.array([b.as_list() for b in gts], dtype=np.float64)
    ix0 = np.maximum(d[:, None, 0], g[None, :, 0])
    iy0 = np.maximum(d[:, None, 1], g[None, :, 1])
    ix1 = np.minimum(d[:, None, 0] + d[:, None, 2], g[None, :, 0] + g[None, :, 2])
    iy1 = np.minimum(d[:, None, 1] + d[:, None, 3], g[None, :, 1] + g[None, :, 3])
    inter = np.clip(ix1 - ix0, 0, None) * np.clip(iy1 - iy0, 0, None)
    union = (d[:, 2] * d[:, 3])[:, None] + (g[:, 2] * g[:, 3])[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def mask_iou_matrix(dets: Sequence[SegMask], gts: Sequence[SegMask]) -> np.ndarray:
    if not dets or not gts:
        return np.zeros((len(dets), len(gts)))
    shapes = {m.shape for m in dets} | {m.shape for m in gts}
    if len(shapes) != 1:
        raise GridMismatchError(f"mask grids differ: {sorted(shapes)}")
    d = np.stack([rle_decode(m).reshape(-1) for m in dets]).astype(np.float64)
    g = np.stack([rle_decode(m).reshape(-1) for m in gts]).astype(np.float64)
    inter = d @ g.T
    union = d.sum(1)[:, None] + g.sum(1)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
