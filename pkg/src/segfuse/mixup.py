"""Confusion-guided mixup: partner selection, geometric plan, blending,
annotation bookkeeping and the Bernoulli-gated augmentation stream.

Every sample draws from its own generator seeded with ``(seed, index)``, so
the stream can be produced in any order or in parallel.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np
from PIL import Image

from .coco_io import write_dataset
from .core import BBox, Dataset, ImageRecord, Instance, bbox_from_mask, rle_decode, rle_encode

log = logging.getLogger(__name__)

DEFAULT_GAMMA = 0.5
DEFAULT_RESIZE_RANGE = (0.4, 0.6)
DEFAULT_BERNOULLI_P = 0.5

Pairs = Set[Tuple[int, int]]
ImageLoader = Callable[[ImageRecord], np.ndarray]


@dataclass(frozen=True)
class AugmentConfig:
    gamma: float = DEFAULT_GAMMA
    resize_range: Tuple[float, float] = DEFAULT_RESIZE_RANGE
    bernoulli_p: float = DEFAULT_BERNOULLI_P
    hflip_p: float = 0.5
    brightness_delta: float = 0.2
    color_jitter: float = 0.1
    min_visible_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.resize_range
        object.__setattr__(self, "resize_range", (float(lo), float(hi)))
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 < lo <= hi:
            raise ValueError(f"resize range must satisfy 0 < lo <= hi, got {self.resize_range}")
        for name in ("bernoulli_p", "hflip_p", "min_visible_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not 0.0 <= self.brightness_delta < 1.0 or not 0.0 <= self.color_jitter < 1.0:
            raise ValueError("brightness_delta and color_jitter must lie in [0, 1)")

    def without_photometrics(self) -> "AugmentConfig":
        return replace(self, brightness_delta=0.0, color_jitter=0.0)


@dataclass(frozen=True)
class SidePlan:
    """Resize to (resized_h, resized_w), optionally mirror, then crop the
    target window whose top-left corner sits at (dy, dx)."""

    src_h: int
    src_w: int
    resized_h: int
    resized_w: int
    target_h: int
    target_w: int
    dy: int = 0
    dx: int = 0
    hflip: bool = False

    def __post_init__(self):
        if not (0 <= self.dy <= self.resized_h - self.target_h
                and 0 <= self.dx <= self.resized_w - self.target_w):
            raise ValueError(f"crop window falls outside the resized source: {self}")

    @property
    def scale(self) -> Tuple[float, float]:
        return (self.resized_h / self.src_h, self.resized_w / self.src_w)

    @classmethod
    def identity(cls, h: int, w: int) -> "SidePlan":
        return cls(h, w, h, w, h, w)


@dataclass(frozen=True)
class BlendPlan:
    target_h: int
    target_w: int
    a: SidePlan
    b: SidePlan
    brightness: float = 1.0
    channel_gains: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    @classmethod
    def identity(cls, h: int, w: int) -> "BlendPlan":
        return cls(h, w, SidePlan.identity(h, w), SidePlan.identity(h, w))

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class AugmentedSample:
    image: np.ndarray
    annotations: List[Instance]
    provenance: Dict = field(default_factory=dict)
    augmented: bool = True


# --------------------------------------------------------------------------
# partner selection


def category_index(dataset: Dataset) -> Dict[int, List[int]]:
    """category id -> sorted ids of images holding at least one instance of it."""
    index: Dict[int, Set[int]] = {}
    for ann in dataset.annotations:
        index.setdefault(ann.category_id, set()).add(ann.image_id)
    return {c: sorted(ids) for c, ids in sorted(index.items())}


def select_partner(
    input_image_id: int,
    index: Mapping[int, Sequence[int]],
    pairs: Pairs,
    rng: np.random.Generator,
) -> Optional[int]:
    present = {c for c, ids in index.items() if input_image_id in ids}
    wanted = {j for i, j in pairs if i in present}
    candidates = sorted({im for j in wanted for im in index.get(j, ())} - {input_image_id})
    if not candidates:
        return None
    return candidates[int(rng.integers(len(candidates)))]


# --------------------------------------------------------------------------
# geometry


def _side(src: Tuple[int, int], th: int, tw: int, rng: np.random.Generator, hflip_p: float) -> SidePlan:
    h, w = src
    scale = max(th / h, tw / w)
    rh = max(th, int(round(h * scale)))
    rw = max(tw, int(round(w * scale)))
    dy = int(rng.integers(0, rh - th + 1))
    dx = int(rng.integers(0, rw - tw + 1))
    flip = bool(rng.random() < hflip_p)
    return SidePlan(h, w, rh, rw, th, tw, dy, dx, flip)


def target_size(dims_a: Tuple[int, int], dims_b: Tuple[int, int], u_h: float, u_w: float) -> Tuple[int, int]:
    th = int(round((dims_a[0] + dims_b[0]) / 2 * u_h))
    tw = int(round((dims_a[1] + dims_b[1]) / 2 * u_w))
    return max(1, th), max(1, tw)


def plan_blend(
    dims_a: Tuple[int, int],
    dims_b: Tuple[int, int],
    config: AugmentConfig,
    rng: np.random.Generator,
    u: Optional[Tuple[float, float]] = None,
) -> BlendPlan:
    """Sample the shared canvas size, per-side crops/flips and photometrics.

    ``u`` overrides the sampled (height, width) size factors.
    """
    if min(*dims_a, *dims_b) <= 0:
        raise ValueError("image dimensions must be positive")
    lo, hi = config.resize_range
    u_h, u_w = u if u is not None else (rng.uniform(lo, hi), rng.uniform(lo, hi))
    th, tw = target_size(dims_a, dims_b, u_h, u_w)
    side_a = _side(dims_a, th, tw, rng, config.hflip_p)
    side_b = _side(dims_b, th, tw, rng, config.hflip_p)
    bd, cj = config.brightness_delta, config.color_jitter
    brightness = float(rng.uniform(1 - bd, 1 + bd)) if bd > 0 else 1.0
    gains = tuple(float(g) for g in rng.uniform(1 - cj, 1 + cj, 3)) if cj > 0 else (1.0, 1.0, 1.0)
    return BlendPlan(th, tw, side_a, side_b, brightness, gains)


def apply_geometric(image: np.ndarray, side: SidePlan) -> np.ndarray:
    img = np.asarray(image)
    if img.shape[:2] != (side.src_h, side.src_w):
        raise ValueError(f"image is {img.shape[:2]}, plan expects {(side.src_h, side.src_w)}")
    if (side.resized_h, side.resized_w) != (side.src_h, side.src_w):
        img = np.asarray(
            Image.fromarray(img).resize((side.resized_w, side.resized_h), Image.BILINEAR)
        )
    if side.hflip:
        img = img[:, ::-1]
    return np.ascontiguousarray(img[side.dy:side.dy + side.target_h, side.dx:side.dx + side.target_w])


def _round_u8(x: np.ndarray) -> np.ndarray:
    # inputs are non-negative, so floor(x + 0.5) rounds half away from zero
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def blend(a: np.ndarray, b: np.ndarray, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"cannot blend images of shapes {a.shape} and {b.shape}")
    return _round_u8(gamma * a.astype(np.float64) + (1.0 - gamma) * b.astype(np.float64))


def apply_photometric(image: np.ndarray, plan: BlendPlan) -> np.ndarray:
    if plan.brightness == 1.0 and plan.channel_gains == (1.0, 1.0, 1.0):
        return image
    gains = np.asarray(plan.channel_gains) * plan.brightness
    return _round_u8(image.astype(np.float64) * gains)


def _nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = mask.shape
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64), w - 1)
    return mask[rows[:, None], cols[None, :]]


def _transform_box(box: BBox, side: SidePlan) -> Tuple[Optional[BBox], float]:
    sy, sx = side.scale
    x, y, w, h = box.x * sx, box.y * sy, box.w * sx, box.h * sy
    if side.hflip:
        x = side.resized_w - x - w
    x0, y0 = max(x, side.dx), max(y, side.dy)
    x1 = min(x + w, side.dx + side.target_w)
    y1 = min(y + h, side.dy + side.target_h)
    if x1 <= x0 or y1 <= y0:
        return None, 0.0
    full = w * h
    frac = (x1 - x0) * (y1 - y0) / full if full > 0 else 0.0
    return BBox(x0 - side.dx, y0 - side.dy, x1 - x0, y1 - y0), frac


def transform_annotations(
    instances: Sequence[Instance],
    side: SidePlan,
    min_visible_fraction: float = 0.0,
    image_id: Optional[int] = None,
) -> List[Instance]:
    """Carry instances through resize, flip and crop; drop empty or mostly
    clipped ones. Boxes of masked instances are recomputed from the mask."""
    out = []
    for inst in instances:
        new_image = inst.image_id if image_id is None else image_id
        if inst.mask is None:
            box, frac = _transform_box(inst.bbox, side)
            if box is None or frac < min_visible_fraction:
                continue
            out.append(replace(inst, image_id=new_image, bbox=box, area=-1.0))
            continue
        m = _nearest(rle_decode(inst.mask), side.resized_h, side.resized_w)
        full = int(m.sum())
        if side.hflip:
            m = m[:, ::-1]
        m = m[side.dy:side.dy + side.target_h, side.dx:side.dx + side.target_w]
        kept = int(m.sum())
        if kept == 0 or kept / full < min_visible_fraction:
            continue
        mask = rle_encode(m)
        out.append(replace(inst, image_id=new_image, mask=mask, bbox=bbox_from_mask(mask), area=-1.0))
    return out


# --------------------------------------------------------------------------
# samples and stream


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & (2**64 - 1), int(index)])


def augment_sample(
    image_a: np.ndarray,
    anns_a: Sequence[Instance],
    image_b: np.ndarray,
    anns_b: Sequence[Instance],
    config: AugmentConfig,
    rng: np.random.Generator,
    plan: Optional[BlendPlan] = None,
    image_id: int = 0,
) -> AugmentedSample:
    if plan is None:
        plan = plan_blend(image_a.shape[:2], image_b.shape[:2], config, rng)
    pa = apply_geometric(image_a, plan.a)
    pb = apply_geometric(image_b, plan.b)
    pixels = apply_photometric(blend(pa, pb, config.gamma), plan)
    kept_a = transform_annotations(anns_a, plan.a, config.min_visible_fraction, image_id)
    kept_b = transform_annotations(anns_b, plan.b, config.min_visible_fraction, image_id)
    merged = [replace(inst, id=n + 1) for n, inst in enumerate(kept_a + kept_b)]
    return AugmentedSample(
        pixels,
        merged,
        {"plan": plan.to_dict(), "kept_a": len(kept_a), "kept_b": len(kept_b)},
    )


def png_loader(root: Union[str, Path]) -> ImageLoader:
    root = Path(root)

    def load(record: ImageRecord) -> np.ndarray:
        with Image.open(root / record.file_name) as im:
            return np.asarray(im.convert("RGB"))

    return load


@dataclass
class StreamItem:
    image_id: int
    sample: Optional[AugmentedSample]
    entry: Dict


def augment_dataset(
    dataset: Dataset,
    images: Union[str, Path, ImageLoader],
    pairs: Pairs,
    config: AugmentConfig,
) -> Iterator[StreamItem]:
    """Yield one item per image (ascending id): the original or a blended sample.

    Failed samples yield ``sample=None`` with the error in ``entry``.
    """
    load = images if callable(images) else png_loader(images)
    index = category_index(dataset)
    by_image = dataset.grouped()
    records = {im.id: im for im in dataset.images}
    for n, image_id in enumerate(dataset.image_ids):
        rng = sample_rng(config.seed, n)
        gate = bool(rng.random() < config.bernoulli_p)
        partner = select_partner(image_id, index, pairs, rng) if gate else None
        entry = {
            "index": n,
            "image_id": image_id,
            "gate": gate,
            "partner": partner,
            "augmented": False,
            "rng": {"seed": config.seed, "counter": n},
            "error": None,
        }
        try:
            img = load(records[image_id])
            if img.shape[:2] != (records[image_id].height, records[image_id].width):
                raise ValueError(f"image {image_id} pixels do not match its record size")
            if partner is None:
                sample = AugmentedSample(img, list(by_image[image_id]), {}, augmented=False)
            else:
                img_b = load(records[partner])
                sample = augment_sample(
                    img, by_image[image_id], img_b, by_image[partner], config, rng, image_id=image_id
                )
                entry["augmented"] = True
                entry["plan"] = sample.provenance["plan"]
                entry["kept"] = [sample.provenance["kept_a"], sample.provenance["kept_b"]]
        except (OSError, ValueError) as exc:
            log.warning("sample %d (image %d) failed: %s", n, image_id, exc)
            entry["error"] = str(exc)
            entry["augmented"] = False
            sample = None
        yield StreamItem(image_id, sample, entry)


def write_augmented(
    dataset: Dataset,
    images: Union[str, Path, ImageLoader],
    pairs: Pairs,
    config: AugmentConfig,
    out_dir: Union[str, Path],
) -> Dict:
    """Materialize the stream as PNGs plus dataset and manifest JSON. Returns the manifest."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    new_images, new_anns, entries = [], [], []
    for item in augment_dataset(dataset, images, pairs, config):
        entries.append(item.entry)
        if item.sample is None:
            continue
        h, w = item.sample.image.shape[:2]
        name = f"{item.image_id}.png"
        Image.fromarray(item.sample.image).save(out_dir / "images" / name)
        new_images.append(ImageRecord(item.image_id, w, h, name))
        for inst in item.sample.annotations:
            new_anns.append(replace(inst, image_id=item.image_id, id=len(new_anns) + 1))
    write_dataset(Dataset(new_images, new_anns, list(dataset.categories)), out_dir / "dataset.json")
    manifest = {
        "config": {**asdict(config), "resize_range": list(config.resize_range)},
        "pairs": [[i, j] for i, j in sorted(pairs)],
        "samples": entries,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return manifest
