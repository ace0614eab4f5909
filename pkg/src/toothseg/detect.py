"""Bounding-box prior sources and box-map construction.

The segmentation network consumes per-tooth box maps from a pluggable
detector.  This module provides the ground-truth oracle, a JSON Lines file
interface for any external detector, confidence/IoU filtering, a seeded
degradation simulator for robustness studies, and rasterization of accepted
detections into (H, W, 32) binary prior maps.

Detections file format: one JSON object per line,
``{"image_id": str, "fdi": int, "bbox": [x, y, w, h], "confidence": float}``
with pixel units in source-image coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fdi import ALL_FDI_CODES, NUM_TEETH, channel_of_fdi, is_valid_fdi
from .geometry import rasterize_box
from .metrics import box_iou_matrix


@dataclass(frozen=True)
class Detection:
    image_id: str
    fdi: int
    bbox: tuple  # (x, y, w, h) pixels in source-image coordinates
    confidence: float

    def __post_init__(self):
        if not is_valid_fdi(self.fdi):
            raise ValueError(f"invalid FDI code {self.fdi!r}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")
        if len(self.bbox) != 4 or self.bbox[2] < 0 or self.bbox[3] < 0:
            raise ValueError(f"bad bbox {self.bbox!r}")


@dataclass(frozen=True)
class DetectorThresholds:
    """Inference-time thresholds: minimum confidence and the IoU above which
    same-tooth duplicates are suppressed."""

    confidence: float = 0.5
    iou: float = 0.5

    def __post_init__(self):
        for name, v in (("confidence", self.confidence), ("iou", self.iou)):
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} threshold must be in (0, 1), got {v}")


@dataclass(frozen=True)
class DegradationSpec:
    """Seeded corruption of a detection set: random misses, box jitter, and
    spurious detections, mimicking a weak detector."""

    drop_rate: float = 0.0
    jitter_px: float = 0.0
    false_positive_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.drop_rate <= 1.0:
            raise ValueError(f"drop_rate must be in [0, 1], got {self.drop_rate}")
        if self.jitter_px < 0 or self.false_positive_rate < 0:
            raise ValueError("jitter_px and false_positive_rate must be >= 0")

    @property
    def is_identity(self) -> bool:
        return self.drop_rate == 0 and self.jitter_px == 0 and self.false_positive_rate == 0


def oracle_detections(annotations) -> list:
    """Perfect detections straight from ground truth, confidence 1.0."""
    return [
        Detection(image_id=a.image_id, fdi=a.fdi, bbox=tuple(a.bbox), confidence=1.0)
        for a in annotations
    ]


def filter_detections(detections, thresholds: DetectorThresholds = DetectorThresholds()) -> list:
    """Drop low-confidence entries, then greedily suppress same-tooth duplicates.

    Survivors are processed in descending confidence; a detection is kept
    unless it overlaps an already-kept detection of the same tooth with IoU
    above ``thresholds.iou``.  Idempotent.
    """
    candidates = [d for d in detections if d.confidence >= thresholds.confidence]
    candidates.sort(key=lambda d: -d.confidence)
    kept = []
    for det in candidates:
        same = [k for k in kept if k.fdi == det.fdi]
        if same:
            ious = box_iou_matrix([det.bbox], [k.bbox for k in same])[0]
            if np.any(ious > thresholds.iou):
                continue
        kept.append(det)
    return kept


def degrade(detections, spec: DegradationSpec, resolution) -> list:
    """Corrupt a detection set deterministically given ``spec.seed``.

    Each entry is dropped with probability ``drop_rate``; surviving box edges
    move independently by uniform(-jitter_px, jitter_px) and are clipped to
    the image; spurious boxes (random tooth, confidence in [0.5, 1]) are added
    with expected count ``false_positive_rate * len(detections)`` (Poisson).

    Args:
        detections: entries to corrupt.
        spec: corruption parameters and seed.
        resolution: (H, W) bounds for clipping and spurious-box placement.
    """
    height, width = float(resolution[0]), float(resolution[1])
    rng = np.random.default_rng(spec.seed)
    out = []
    image_id = detections[0].image_id if detections else ""
    for det in detections:
        if rng.random() < spec.drop_rate:
            continue
        x, y, w, h = det.bbox
        if spec.jitter_px > 0:
            dx1, dy1, dx2, dy2 = rng.uniform(-spec.jitter_px, spec.jitter_px, size=4)
            x1, y1 = x + dx1, y + dy1
            x2, y2 = x + w + dx2, y + h + dy2
            x1, x2 = sorted((min(max(x1, 0.0), width), min(max(x2, 0.0), width)))
            y1, y2 = sorted((min(max(y1, 0.0), height), min(max(y2, 0.0), height)))
            det = Detection(det.image_id, det.fdi, (x1, y1, x2 - x1, y2 - y1), det.confidence)
        out.append(det)
    if spec.false_positive_rate > 0 and detections:
        n_fake = int(rng.poisson(spec.false_positive_rate * len(detections)))
        for _ in range(n_fake):
            fdi = int(ALL_FDI_CODES[rng.integers(0, NUM_TEETH)])
            w = float(rng.uniform(0.02, 0.15) * width)
            h = float(rng.uniform(0.02, 0.15) * height)
            x = float(rng.uniform(0, width - w))
            y = float(rng.uniform(0, height - h))
            conf = float(rng.uniform(0.5, 1.0))
            out.append(Detection(image_id, fdi, (x, y, w, h), conf))
    return out


def build_bbox_map(detections, image_size, map_size=None) -> np.ndarray:
    """Rasterize detections into an (H, W, 32) binary prior map.

    Channel c is 1 on every pixel covered by an accepted box of the tooth
    with channel index c; overlapping boxes of one tooth union.  Boxes are
    given in source-image coordinates (``image_size`` = (H, W)) and scaled
    onto the output grid (``map_size``, defaulting to the image size).
    """
    src_h, src_w = float(image_size[0]), float(image_size[1])
    if map_size is None:
        map_size = image_size
    out_h, out_w = int(map_size[0]), int(map_size[1])
    sx, sy = out_w / src_w, out_h / src_h
    stack = np.zeros((out_h, out_w, NUM_TEETH), dtype=np.uint8)
    for det in detections:
        x, y, w, h = det.bbox
        scaled = (x * sx, y * sy, w * sx, h * sy)
        mask = rasterize_box(scaled, (out_h, out_w))
        stack[:, :, channel_of_fdi(det.fdi)] |= mask.astype(np.uint8)
    return stack


def save_detections(detections, path) -> None:
    """Write detections as JSON Lines, one object per detection."""
    with open(path, "w") as fh:
        for det in detections:
            fh.write(
                json.dumps(
                    {
                        "image_id": det.image_id,
                        "fdi": det.fdi,
                        "bbox": [float(v) for v in det.bbox],
                        "confidence": float(det.confidence),
                    }
                )
            )
            fh.write("\n")


def load_detections(path) -> dict:
    """Read a JSON Lines detections file into {image_id: [Detection, ...]}."""
    out = {}
    with open(Path(path)) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                det = Detection(
                    image_id=str(rec["image_id"]),
                    fdi=int(rec["fdi"]),
                    bbox=tuple(float(v) for v in rec["bbox"]),
                    confidence=float(rec["confidence"]),
                )
            except (KeyError, ValueError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{line_no}: bad detection record: {exc}") from exc
            out.setdefault(det.image_id, []).append(det)
    return out
