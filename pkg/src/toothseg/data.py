"""Dataset ingestion, mask construction, augmentation, and split building.

On disk a dataset is ``<root>/images/<imageId>.png`` (8-bit grayscale) plus a
single ``<root>/annotations.json``::

    {"images": [{"id", "file", "width", "height", "category"}, ...],
     "annotations": [{"image_id", "fdi", "polygon": [[x, y], ...],
                      "bbox": [x, y, w, h]}, ...]}

Coordinates are pixels in source-image space.  Preprocessing resizes the
image to the working resolution first and then applies contrast-limited
equalization; annotations are scaled alongside so masks are rasterized
directly at the working resolution.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .clahe import clahe
from .fdi import (
    CATEGORIES,
    CRITICAL_CATEGORIES,
    HORIZONTAL,
    NUM_TEETH,
    VERTICAL,
    channel_of_fdi,
    fdi_of_channel,
    flip_fdi,
    is_valid_fdi,
)
from .geometry import polygon_bbox, polygon_is_simple, rasterize_polygon, shoelace_area


@dataclass(frozen=True)
class ToothAnnotation:
    """One tooth instance: FDI code, outline polygon, and its bounding box."""

    image_id: str
    fdi: int
    polygon: tuple  # ((x, y), ...) pixel vertices, >= 3 points
    bbox: tuple  # (x, y, w, h) pixels

    def __post_init__(self):
        if not is_valid_fdi(self.fdi):
            raise ValueError(f"invalid FDI code {self.fdi!r} on image {self.image_id!r}")
        if len(self.polygon) < 3:
            raise ValueError(f"polygon needs >= 3 vertices, got {len(self.polygon)}")
        if len(self.bbox) != 4 or self.bbox[2] < 0 or self.bbox[3] < 0:
            raise ValueError(f"bad bbox {self.bbox!r} on image {self.image_id!r}")

    def polygon_array(self) -> np.ndarray:
        return np.asarray(self.polygon, dtype=np.float64)


@dataclass(frozen=True)
class ImageEntry:
    image_id: str
    file: str
    width: int
    height: int
    category: int
    annotations: tuple = ()

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r} for image {self.image_id!r}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"bad image size for {self.image_id!r}")


@dataclass
class DatasetManifest:
    entries: list
    split: str | None = None

    def by_id(self) -> dict:
        return {e.image_id: e for e in self.entries}

    def image_ids(self) -> list:
        return [e.image_id for e in self.entries]


@dataclass(frozen=True)
class PreprocessConfig:
    """Resize-then-equalize settings for the working resolution."""

    clip_limit: float = 0.02
    tile_grid: tuple = (8, 8)
    target_resolution: tuple = (512, 512)

    def __post_init__(self):
        if self.clip_limit <= 0:
            raise ValueError(f"clip_limit must be > 0, got {self.clip_limit}")
        th, tw = self.target_resolution
        if th % self.tile_grid[0] or tw % self.tile_grid[1]:
            raise ValueError(
                f"tile grid {self.tile_grid} does not divide resolution {self.target_resolution}"
            )


# ---------------------------------------------------------------------------
# manifest (de)serialization and validation

def manifest_to_dict(manifest: DatasetManifest) -> dict:
    images = [
        {"id": e.image_id, "file": e.file, "width": e.width, "height": e.height, "category": e.category}
        for e in manifest.entries
    ]
    annotations = [
        {
            "image_id": a.image_id,
            "fdi": a.fdi,
            "polygon": [[float(x), float(y)] for x, y in a.polygon],
            "bbox": [float(v) for v in a.bbox],
        }
        for e in manifest.entries
        for a in e.annotations
    ]
    return {"images": images, "annotations": annotations}


def manifest_from_dict(doc: dict) -> DatasetManifest:
    anns_by_image = {}
    for rec in doc.get("annotations", []):
        fdi = int(rec["fdi"])
        if not is_valid_fdi(fdi):
            warnings.warn(f"dropping annotation with unsupported FDI code {fdi} on {rec['image_id']}")
            continue
        ann = ToothAnnotation(
            image_id=str(rec["image_id"]),
            fdi=fdi,
            polygon=tuple((float(x), float(y)) for x, y in rec["polygon"]),
            bbox=tuple(float(v) for v in rec["bbox"]),
        )
        anns_by_image.setdefault(ann.image_id, []).append(ann)
    entries = []
    for rec in doc["images"]:
        image_id = str(rec["id"])
        entries.append(
            ImageEntry(
                image_id=image_id,
                file=str(rec["file"]),
                width=int(rec["width"]),
                height=int(rec["height"]),
                category=int(rec["category"]),
                annotations=tuple(anns_by_image.pop(image_id, ())),
            )
        )
    for image_id in anns_by_image:
        raise ValueError(f"annotations reference unknown image id {image_id!r}")
    return DatasetManifest(entries=entries)


def save_manifest(manifest: DatasetManifest, root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    path = root / "annotations.json"
    with open(path, "w") as fh:
        json.dump(manifest_to_dict(manifest), fh, indent=1)
        fh.write("\n")
    return path


def load_manifest(root) -> DatasetManifest:
    with open(Path(root) / "annotations.json") as fh:
        return manifest_from_dict(json.load(fh))


def validate_manifest(manifest: DatasetManifest) -> list:
    """Collect human-readable issues; an empty list means the manifest is usable."""
    issues = []
    seen = set()
    for entry in manifest.entries:
        if entry.image_id in seen:
            issues.append(f"duplicate image id {entry.image_id!r}")
        seen.add(entry.image_id)
        fdi_counts = {}
        for ann in entry.annotations:
            if ann.image_id != entry.image_id:
                issues.append(f"annotation on {entry.image_id!r} carries image_id {ann.image_id!r}")
            fdi_counts[ann.fdi] = fdi_counts.get(ann.fdi, 0) + 1
            pts = ann.polygon_array()
            if shoelace_area(pts) == 0:
                issues.append(f"degenerate polygon for tooth {ann.fdi} on {entry.image_id!r}")
            elif not polygon_is_simple(pts):
                issues.append(f"self-intersecting polygon for tooth {ann.fdi} on {entry.image_id!r}")
            x, y, w, h = ann.bbox
            if (
                pts[:, 0].min() < x - 1e-6
                or pts[:, 1].min() < y - 1e-6
                or pts[:, 0].max() > x + w + 1e-6
                or pts[:, 1].max() > y + h + 1e-6
            ):
                issues.append(f"bbox does not contain polygon for tooth {ann.fdi} on {entry.image_id!r}")
        for fdi, count in fdi_counts.items():
            if count > 1 and not CATEGORIES[entry.category].supernumerary:
                issues.append(f"tooth {fdi} annotated {count} times on {entry.image_id!r}")
    return issues


# ---------------------------------------------------------------------------
# images and masks

def load_image(path) -> np.ndarray:
    """8-bit grayscale PNG -> float32 (H, W) in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"), dtype=np.float32)
    return arr / 255.0


def save_image(image: np.ndarray, path) -> None:
    arr = np.clip(np.asarray(image) * 255.0, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def resize_image(image: np.ndarray, resolution) -> np.ndarray:
    """Bilinear resize of a float (H, W) image to (H', W')."""
    h, w = int(resolution[0]), int(resolution[1])
    if image.shape == (h, w):
        return image.astype(np.float32)
    pil = Image.fromarray(np.asarray(image, dtype=np.float32), mode="F")
    return np.asarray(pil.resize((w, h), Image.BILINEAR), dtype=np.float32)


def scale_annotation(ann: ToothAnnotation, sx: float, sy: float) -> ToothAnnotation:
    """Rescale an annotation's polygon and recompute its grid-aligned bbox."""
    polygon = tuple((x * sx, y * sy) for x, y in ann.polygon)
    return replace(ann, polygon=polygon, bbox=polygon_bbox(np.asarray(polygon)))


def preprocess_image(image: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    resized = resize_image(image, config.target_resolution)
    return clahe(resized, clip_limit=config.clip_limit, tile_grid=config.tile_grid).astype(np.float32)


def build_mask_stack(annotations, resolution) -> np.ndarray:
    """Rasterize annotations into an (H, W, 32) binary stack, one channel per tooth.

    All annotations must share one image id.  Two annotations of the same
    tooth union into its channel with a warning (expected for supernumerary
    images, suspicious elsewhere).
    """
    image_ids = {a.image_id for a in annotations}
    if len(image_ids) > 1:
        raise ValueError(f"annotations span multiple images: {sorted(image_ids)}")
    height, width = int(resolution[0]), int(resolution[1])
    stack = np.zeros((height, width, NUM_TEETH), dtype=np.uint8)
    seen = set()
    for ann in annotations:
        channel = channel_of_fdi(ann.fdi)
        if channel in seen:
            warnings.warn(f"tooth {ann.fdi} annotated more than once; channels unioned")
        seen.add(channel)
        mask = rasterize_polygon(ann.polygon_array(), (height, width))
        stack[:, :, channel] |= mask.astype(np.uint8)
    return stack


def flip_channel_permutation(axis: str) -> np.ndarray:
    """perm[c] = channel holding tooth c's anatomy after flipping along ``axis``."""
    return np.array(
        [channel_of_fdi(flip_fdi(fdi_of_channel(c), axis)) for c in range(NUM_TEETH)],
        dtype=np.int64,
    )


def flip_sample(image, mask_stack, bbox_map, axis: str):
    """Flip an (image, mask stack, box map) triple spatially and remap channels.

    The channel permutation keeps channel c holding tooth c's anatomy after
    the flip, so flipped samples stay correctly labeled.  Applying the same
    flip twice restores the input exactly.  Any of the three tensors may be
    None and passes through as None.
    """
    if axis == HORIZONTAL:
        spatial = lambda a: np.flip(a, axis=1)
    elif axis == VERTICAL:
        spatial = lambda a: np.flip(a, axis=0)
    else:
        raise ValueError(f"axis must be 'horizontal' or 'vertical', got {axis!r}")
    perm = flip_channel_permutation(axis)

    def flip_stack(stack):
        if stack is None:
            return None
        return np.ascontiguousarray(spatial(stack)[:, :, perm])

    flipped_image = None if image is None else np.ascontiguousarray(spatial(image))
    return flipped_image, flip_stack(mask_stack), flip_stack(bbox_map)


# ---------------------------------------------------------------------------
# splits

def largest_remainder(weights, total: int) -> np.ndarray:
    """Apportion ``total`` into integer counts proportional to ``weights``.

    Floors the quotas and hands the remaining units to the largest
    fractional parts (ties going to the lower index), so the result is
    deterministic and sums exactly to ``total``.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.sum() <= 0:
        raise ValueError("weights must have positive sum")
    quotas = w / w.sum() * total
    counts = np.floor(quotas).astype(np.int64)
    remainder = total - counts.sum()
    order = sorted(range(len(w)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: int(remainder)]:
        counts[i] += 1
    return counts


@dataclass
class Splits:
    train: DatasetManifest
    val: DatasetManifest
    test1: DatasetManifest
    test2: DatasetManifest


def make_splits(
    manifest: DatasetManifest,
    seed: int,
    test_fraction: float = 0.2,
    val_fraction: float = 0.1,
) -> Splits:
    """Category-stratified, seed-deterministic train/val/test splits.

    ``test1`` holds ``round(test_fraction * N)`` images apportioned across
    categories by largest remainder; ``test2`` is test1 with the critical
    categories (implants, supernumerary) removed.  ``val`` is carved from the
    remaining images the same way.  train + val + test1 partition the input.
    """
    if not manifest.entries:
        raise ValueError("manifest is empty")
    by_category = {}
    for entry in manifest.entries:
        by_category.setdefault(entry.category, []).append(entry)
    for cat in CATEGORIES:
        if cat not in by_category:
            warnings.warn(f"category {cat} missing from manifest; splits proceed without it")

    cats = sorted(by_category)
    rng = np.random.default_rng(seed)
    shuffled = {}
    for cat in cats:
        entries = sorted(by_category[cat], key=lambda e: e.image_id)
        rng.shuffle(entries)
        shuffled[cat] = entries

    n_total = len(manifest.entries)
    test_counts = largest_remainder([len(shuffled[c]) for c in cats], round(test_fraction * n_total))
    test1, rest = [], {}
    for cat, count in zip(cats, test_counts):
        test1.extend(shuffled[cat][: int(count)])
        rest[cat] = shuffled[cat][int(count):]

    n_rest = sum(len(v) for v in rest.values())
    val_counts = largest_remainder([len(rest[c]) for c in cats], round(val_fraction * n_rest))
    val, train = [], []
    for cat, count in zip(cats, val_counts):
        val.extend(rest[cat][: int(count)])
        train.extend(rest[cat][int(count):])

    test2 = [e for e in test1 if e.category not in CRITICAL_CATEGORIES]
    key = lambda e: e.image_id
    return Splits(
        train=DatasetManifest(sorted(train, key=key), split="train"),
        val=DatasetManifest(sorted(val, key=key), split="val"),
        test1=DatasetManifest(sorted(test1, key=key), split="test1"),
        test2=DatasetManifest(sorted(test2, key=key), split="test2"),
    )
