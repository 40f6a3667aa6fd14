"""Synthetic datasets and noisy model predictions for desk-scale checks.

Shapes are axis-aligned rectangles and ellipses rasterized at pixel centres,
so ground-truth masks are exact. Randomness is drawn per image from
``default_rng([seed, image_id])``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .core import BBox, Dataset, ImageRecord, Instance, bbox_from_mask, rle_decode, rle_encode

Grouped = Dict[int, List[Instance]]


@dataclass
class NoiseProfile:
    box_jitter_sigma: float = 0.05
    drop_rate: float = 0.1
    fp_rate: float = 0.5
    confusion: Optional[List[List[float]]] = None  # rows/cols follow sorted category ids; None = identity
    score_mean_tp: float = 0.8
    score_mean_fp: float = 0.3
    score_sigma: float = 0.1
    name: str = ""

    def __post_init__(self):
        for attr in ("drop_rate", "score_mean_tp", "score_mean_fp"):
            v = getattr(self, attr)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{attr} must lie in [0, 1], got {v}")
        if self.box_jitter_sigma < 0 or self.fp_rate < 0 or self.score_sigma < 0:
            raise ValueError("sigmas and fp_rate must be non-negative")
        if self.confusion is not None:
            m = np.asarray(self.confusion, dtype=np.float64)
            if m.ndim != 2 or m.shape[0] != m.shape[1] or (m < 0).any():
                raise ValueError("confusion must be a square non-negative matrix")
            if not np.allclose(m.sum(axis=1), 1.0, atol=1e-9):
                raise ValueError("confusion rows must sum to 1")

    @classmethod
    def zero_noise(cls, score: float = 1.0) -> "NoiseProfile":
        return cls(0.0, 0.0, 0.0, None, score, 0.0, 0.0, "exact")

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "NoiseProfile":
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown noise profile fields: {sorted(extra)}")
        return cls(**data)


def _shape_mask(kind: str, h: int, w: int, x: int, y: int, bw: int, bh: int) -> np.ndarray:
    m = np.zeros((h, w), dtype=bool)
    if kind == "rect":
        m[y:y + bh, x:x + bw] = True
        return m
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    cx, cy, rx, ry = x + bw / 2, y + bh / 2, bw / 2, bh / 2
    return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0


def gen_dataset(
    seed: int,
    n_images: int,
    n_categories: int,
    instances_per_image: Tuple[int, int] = (1, 4),
    image_dims: Tuple[int, int] = (32, 96),
    render: bool = True,
) -> Tuple[Dataset, Dict[int, np.ndarray]]:
    """Random images of filled rectangles/ellipses on a solid background.

    Returns the dataset and, when ``render`` is set, RGB pixels per image id.
    Masks are the analytic shapes; later instances may occlude earlier ones
    in the pixels but never in the masks.
    """
    if n_images < 1 or n_categories < 1:
        raise ValueError("n_images and n_categories must be positive")
    lo_n, hi_n = instances_per_image
    lo_d, hi_d = image_dims
    if not 0 <= lo_n <= hi_n or not 4 <= lo_d <= hi_d:
        raise ValueError("bad instance or dimension range")
    palette = np.random.default_rng([seed, 2**31]).integers(40, 256, size=(n_categories, 3))
    images, anns, pixels = [], [], {}
    for image_id in range(1, n_images + 1):
        rng = np.random.default_rng([seed, image_id])
        h, w = (int(v) for v in rng.integers(lo_d, hi_d + 1, size=2))
        images.append(ImageRecord(image_id, w, h, f"{image_id}.png"))
        canvas = np.empty((h, w, 3), dtype=np.uint8)
        canvas[:] = rng.integers(0, 40, size=3)
        for _ in range(int(rng.integers(lo_n, hi_n + 1))):
            kind = "rect" if rng.random() < 0.5 else "ellipse"
            bw = int(rng.integers(max(2, w // 8), max(3, w // 2) + 1))
            bh = int(rng.integers(max(2, h // 8), max(3, h // 2) + 1))
            x = int(rng.integers(0, w - bw + 1))
            y = int(rng.integers(0, h - bh + 1))
            cat = int(rng.integers(1, n_categories + 1))
            m = _shape_mask(kind, h, w, x, y, bw, bh)
            canvas[m] = palette[cat - 1]
            mask = rle_encode(m)
            anns.append(Instance(image_id, cat, bbox_from_mask(mask), mask, None, len(anns) + 1))
        if render:
            pixels[image_id] = canvas
    cats = [(c, f"class_{c}") for c in range(1, n_categories + 1)]
    return Dataset(images, anns, cats), pixels


def _clip_score(rng: np.random.Generator, mean: float, sigma: float) -> float:
    if sigma == 0:
        return float(mean)
    return float(np.clip(rng.normal(mean, sigma), 0.0, 1.0))


def _jitter(inst: Instance, rng: np.random.Generator, sigma: float, h: int, w: int):
    b = inst.bbox
    if sigma == 0:
        return b, inst.mask
    x0 = b.x + rng.normal(0, sigma * b.w)
    x1 = b.x + b.w + rng.normal(0, sigma * b.w)
    y0 = b.y + rng.normal(0, sigma * b.h)
    y1 = b.y + b.h + rng.normal(0, sigma * b.h)
    if inst.mask is None:
        x0, x1 = sorted((x0, x1))
        y0, y1 = sorted((y0, y1))
        return BBox.from_xyxy(x0, y0, x1, y1), None
    # integer box, at least one pixel, inside the image
    x0 = int(np.clip(round(x0), 0, w - 1))
    y0 = int(np.clip(round(y0), 0, h - 1))
    x1 = int(np.clip(round(x1), x0 + 1, w))
    y1 = int(np.clip(round(y1), y0 + 1, h))
    src = rle_decode(inst.mask)
    bx, by, bw, bh = (int(v) for v in (b.x, b.y, b.w, b.h))
    crop = src[by:by + bh, bx:bx + bw]
    oh, ow = y1 - y0, x1 - x0
    rows = np.minimum(((np.arange(oh) + 0.5) * bh / oh).astype(np.int64), bh - 1)
    cols = np.minimum(((np.arange(ow) + 0.5) * bw / ow).astype(np.int64), bw - 1)
    out = np.zeros_like(src)
    out[y0:y1, x0:x1] = crop[rows[:, None], cols[None, :]]
    if not out.any():
        out[y0:y1, x0:x1] = True
    mask = rle_encode(out)
    return bbox_from_mask(mask), mask


def perturb_predictions(gt: Dataset, profile: NoiseProfile, seed: int) -> Grouped:
    """Noisy predictions for every image of ``gt``, best score first."""
    cat_ids = gt.category_ids
    pos = {c: i for i, c in enumerate(cat_ids)}
    flip = None
    if profile.confusion is not None:
        flip = np.asarray(profile.confusion, dtype=np.float64)
        if flip.shape[0] != len(cat_ids):
            raise ValueError(f"confusion is {flip.shape}, dataset has {len(cat_ids)} categories")
    by_image = gt.grouped()
    out: Grouped = {}
    for im in sorted(gt.images, key=lambda r: r.id):
        rng = np.random.default_rng([seed, im.id])
        dets = []
        for inst in by_image[im.id]:
            if rng.random() < profile.drop_rate:
                continue
            box, mask = _jitter(inst, rng, profile.box_jitter_sigma, im.height, im.width)
            cat = inst.category_id
            if flip is not None:
                cat = cat_ids[int(rng.choice(len(cat_ids), p=flip[pos[cat]]))]
            score = _clip_score(rng, profile.score_mean_tp, profile.score_sigma)
            dets.append(Instance(im.id, cat, box, mask, score))
        for _ in range(int(rng.poisson(profile.fp_rate))):
            bw = int(rng.integers(1, max(2, im.width // 3) + 1))
            bh = int(rng.integers(1, max(2, im.height // 3) + 1))
            x = int(rng.integers(0, im.width - bw + 1))
            y = int(rng.integers(0, im.height - bh + 1))
            m = np.zeros((im.height, im.width), dtype=bool)
            m[y:y + bh, x:x + bw] = True
            mask = rle_encode(m)
            cat = cat_ids[int(rng.integers(len(cat_ids)))]
            score = _clip_score(rng, profile.score_mean_fp, profile.score_sigma)
            dets.append(Instance(im.id, cat, BBox(x, y, bw, bh), mask, score))
        dets.sort(key=lambda d: -d.score)
        out[im.id] = dets
    return out


DEFAULT_PROFILES: Sequence[NoiseProfile] = (
    NoiseProfile(0.05, 0.10, 0.3, None, 0.85, 0.30, 0.10, "model_a"),
    NoiseProfile(0.10, 0.20, 0.6, None, 0.75, 0.35, 0.15, "model_b"),
    NoiseProfile(0.15, 0.05, 1.0, None, 0.70, 0.40, 0.15, "model_c"),
)
