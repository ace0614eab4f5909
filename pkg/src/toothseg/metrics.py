"""Detection and segmentation evaluation.

Detection quality is scored two ways that feed the same report:

* a per-image confusion matrix built by class-agnostic greedy box matching
  (rows = 32 predicted classes plus one "unclassified" row for ground-truth
  teeth no detection claimed; columns = 32 ground-truth classes), from which
  accuracy / per-class precision / per-class recall are read off, and
* per-class average precision from a confidence sweep of the precision-recall
  curve at a fixed box-match IoU.  AP50 fixes that IoU at 0.5; mAP averages
  the sweep over IoU 0.50:0.05:0.95.

Segmentation quality is the per-channel Dice overlap between binary mask
stacks, with channels that are empty on both sides excluded from averages so
absent teeth do not bias per-category means.

All rates are fractions in [0, 1]; callers multiply by 100 for display.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .fdi import (
    ALL_FDI_CODES,
    CHANNELS_BY_TYPE,
    NUM_TEETH,
    TOOTH_TYPES,
    channel_of_fdi,
    fdi_of_channel,
    tooth_type,
)

logger = logging.getLogger(__name__)

UNCLASSIFIED_ROW = NUM_TEETH  # last confusion-matrix row

#: IoU grid averaged for mAP.
MAP_IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2))


def iou(box_a, box_b) -> float:
    """Intersection over union of two (x, y, w, h) boxes; 0 when the union is empty."""
    xa, ya, wa, ha = (float(v) for v in box_a)
    xb, yb, wb, hb = (float(v) for v in box_b)
    if wa < 0 or ha < 0 or wb < 0 or hb < 0:
        raise ValueError(f"boxes must have non-negative size: {box_a!r}, {box_b!r}")
    iw = min(xa + wa, xb + wb) - max(xa, xb)
    ih = min(ya + ha, yb + hb) - max(ya, yb)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = wa * ha + wb * hb - inter
    return inter / union if union > 0 else 0.0


def box_iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) arrays of (x, y, w, h) boxes."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    if a.size and (a[:, 2:] < 0).any() or b.size and (b[:, 2:] < 0).any():
        raise ValueError("boxes must have non-negative size")
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    ax1, ay1 = a[:, 0:1], a[:, 1:2]
    ax2, ay2 = ax1 + a[:, 2:3], ay1 + a[:, 3:4]
    bx1, by1 = b[None, :, 0], b[None, :, 1]
    bx2, by2 = bx1 + b[None, :, 2], by1 + b[None, :, 3]
    iw = np.maximum(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0.0)
    ih = np.maximum(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0.0)
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


@dataclass
class MatchResult:
    """Outcome of matching one image's detections against its ground truth."""

    confusion: np.ndarray  # (33, 32) int64, rows = predicted + unclassified
    tp: np.ndarray  # (32,) per-class true positives
    fp: np.ndarray  # (32,) per-class false positives
    fn: np.ndarray  # (32,) per-class false negatives (incl. misclassified)
    pairs: list = field(default_factory=list)  # (detection idx, annotation idx)


def match_detections(detections, annotations, iou_threshold: float = 0.5) -> MatchResult:
    """Greedily match detections to ground-truth boxes, class-agnostically.

    Detections are visited in descending confidence; each claims the
    still-unmatched ground-truth box of highest IoU >= ``iou_threshold``.
    Matched pairs land in the confusion matrix at (predicted class, true
    class); ground truths nothing claimed go to the unclassified row.
    Detections that match nothing count as false positives only.
    """
    confusion = np.zeros((NUM_TEETH + 1, NUM_TEETH), dtype=np.int64)
    pairs = []
    n_det_per_class = np.zeros(NUM_TEETH, dtype=np.int64)
    for det in detections:
        n_det_per_class[channel_of_fdi(det.fdi)] += 1

    gt_boxes = np.array([a.bbox for a in annotations], dtype=np.float64).reshape(-1, 4)
    det_order = sorted(range(len(detections)), key=lambda i: (-detections[i].confidence, i))
    gt_taken = np.zeros(len(annotations), dtype=bool)
    if len(annotations):
        for di in det_order:
            ious = box_iou_matrix([detections[di].bbox], gt_boxes)[0]
            ious[gt_taken] = -1.0
            gi = int(np.argmax(ious))
            if ious[gi] >= iou_threshold:
                gt_taken[gi] = True
                pairs.append((di, gi))
                row = channel_of_fdi(detections[di].fdi)
                col = channel_of_fdi(annotations[gi].fdi)
                confusion[row, col] += 1
    for gi, ann in enumerate(annotations):
        if not gt_taken[gi]:
            confusion[UNCLASSIFIED_ROW, channel_of_fdi(ann.fdi)] += 1

    diag = np.diag(confusion[:NUM_TEETH])
    col_sums = confusion.sum(axis=0)
    return MatchResult(
        confusion=confusion,
        tp=diag.copy(),
        fp=n_det_per_class - diag,
        fn=col_sums - diag,
        pairs=pairs,
    )


def _nanmean(values) -> float:
    arr = np.asarray(values, dtype=np.float64)
    good = ~np.isnan(arr)
    return float(arr[good].mean()) if good.any() else float("nan")


@dataclass
class PrecisionRecall:
    precision: np.ndarray  # (32,), nan where the class was never predicted
    recall: np.ndarray  # (32,), nan where the class has no ground truth
    accuracy: float
    mean_precision: float
    mean_recall: float


def precision_recall(confusion: np.ndarray) -> PrecisionRecall:
    """Per-class precision/recall and overall accuracy from a confusion matrix.

    recall_c = M[c, c] / column c total (ground truths of class c);
    precision_c = M[c, c] / row c total (predictions of class c).  Zero
    denominators yield nan, which the means skip.
    """
    m = np.asarray(confusion, dtype=np.float64)
    if m.shape != (NUM_TEETH + 1, NUM_TEETH):
        raise ValueError(f"expected a ({NUM_TEETH + 1}, {NUM_TEETH}) confusion matrix, got {m.shape}")
    diag = np.diag(m[:NUM_TEETH])
    col_sums = m.sum(axis=0)
    row_sums = m[:NUM_TEETH].sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = np.where(col_sums > 0, diag / col_sums, np.nan)
        precision = np.where(row_sums > 0, diag / row_sums, np.nan)
    total = m.sum()
    accuracy = float(diag.sum() / total) if total > 0 else float("nan")
    return PrecisionRecall(precision, recall, accuracy, _nanmean(precision), _nanmean(recall))


def _class_pr_sweep(dets_by_image, gts_by_image, channel: int, iou_threshold: float):
    """Confidence sweep for one class at one IoU threshold.

    Returns (thresholds, precisions, recalls, ap) where the arrays hold one
    point per distinct confidence value, descending.  ``ap`` is nan when the
    class has no ground-truth instances.
    """
    records = []  # (confidence, is_tp), ordered by global descending confidence
    n_gt = 0
    for image_id in sorted(set(dets_by_image) | set(gts_by_image)):
        dets = [d for d in dets_by_image.get(image_id, []) if channel_of_fdi(d.fdi) == channel]
        gts = [a for a in gts_by_image.get(image_id, []) if channel_of_fdi(a.fdi) == channel]
        n_gt += len(gts)
        if not dets:
            continue
        order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
        gt_boxes = np.array([a.bbox for a in gts], dtype=np.float64).reshape(-1, 4)
        taken = np.zeros(len(gts), dtype=bool)
        for di in order:
            matched = False
            if len(gts):
                ious = box_iou_matrix([dets[di].bbox], gt_boxes)[0]
                ious[taken] = -1.0
                gi = int(np.argmax(ious))
                if ious[gi] >= iou_threshold:
                    taken[gi] = True
                    matched = True
            records.append((dets[di].confidence, matched))

    if n_gt == 0:
        if records:
            logger.warning(
                "class %s has detections but no ground truth; excluded from AP means",
                fdi_of_channel(channel),
            )
        return np.array([]), np.array([]), np.array([]), float("nan")
    if not records:
        return np.array([]), np.array([]), np.array([]), 0.0

    records.sort(key=lambda r: -r[0])
    confs = np.array([r[0] for r in records])
    tps = np.cumsum([r[1] for r in records])
    ranks = np.arange(1, len(records) + 1)
    # one PR point per distinct confidence: the last index of each tie group
    boundary = np.nonzero(np.diff(confs, append=-np.inf))[0]
    thresholds = confs[boundary]
    precisions = tps[boundary] / ranks[boundary]
    recalls = tps[boundary] / n_gt
    ap = float(np.sum(np.diff(recalls, prepend=0.0) * precisions))
    return thresholds, precisions, recalls, ap


@dataclass
class DetectionMetrics:
    """Aggregate detection scores over a dataset."""

    confusion: np.ndarray
    precision: np.ndarray  # (32,)
    recall: np.ndarray  # (32,)
    accuracy: float
    mean_precision: float
    mean_recall: float
    ap50_per_class: np.ndarray  # (32,), nan = class absent from ground truth
    ap50: float
    map: float
    ap_by_iou: dict  # iou threshold -> mean AP
    pr_curves: dict  # channel -> (thresholds, precisions, recalls) at IoU 0.5


def evaluate_detections(
    dets_by_image,
    gts_by_image,
    match_iou: float = 0.5,
    map_ious=MAP_IOU_THRESHOLDS,
) -> DetectionMetrics:
    """Full detection evaluation of per-image detections against annotations.

    Args:
        dets_by_image: mapping image_id -> sequence of detections (``fdi``,
            ``bbox``, ``confidence`` attributes).
        gts_by_image: mapping image_id -> sequence of annotations (``fdi``,
            ``bbox`` attributes).
        match_iou: IoU for the confusion-matrix matching and AP50.
        map_ious: IoU grid averaged into mAP.
    """
    confusion = np.zeros((NUM_TEETH + 1, NUM_TEETH), dtype=np.int64)
    for image_id in sorted(set(dets_by_image) | set(gts_by_image)):
        result = match_detections(
            list(dets_by_image.get(image_id, [])),
            list(gts_by_image.get(image_id, [])),
            iou_threshold=match_iou,
        )
        confusion += result.confusion
    pr = precision_recall(confusion)

    ap_per_iou = {}
    ap50_per_class = np.full(NUM_TEETH, np.nan)
    pr_curves = {}
    for thr in map_ious:
        aps = np.full(NUM_TEETH, np.nan)
        for c in range(NUM_TEETH):
            thrs, precs, recs, ap = _class_pr_sweep(dets_by_image, gts_by_image, c, float(thr))
            aps[c] = ap
            if float(thr) == match_iou:
                ap50_per_class[c] = ap
                pr_curves[c] = (thrs, precs, recs)
        ap_per_iou[float(thr)] = _nanmean(aps)
    ap50 = ap_per_iou.get(match_iou, float("nan"))
    mean_ap = _nanmean(list(ap_per_iou.values()))
    return DetectionMetrics(
        confusion=confusion,
        precision=pr.precision,
        recall=pr.recall,
        accuracy=pr.accuracy,
        mean_precision=pr.mean_precision,
        mean_recall=pr.mean_recall,
        ap50_per_class=ap50_per_class,
        ap50=ap50,
        map=mean_ap,
        ap_by_iou=ap_per_iou,
        pr_curves=pr_curves,
    )


def dice_score(pred_stack: np.ndarray, truth_stack: np.ndarray) -> np.ndarray:
    """Per-channel Dice between two binary (H, W, 32) mask stacks.

    Channels empty on both sides come back nan (excluded from averages);
    a channel empty on one side only scores 0.
    """
    p = np.asarray(pred_stack)
    g = np.asarray(truth_stack)
    if p.shape != g.shape or p.ndim != 3 or p.shape[2] != NUM_TEETH:
        raise ValueError(f"expected matching (H, W, {NUM_TEETH}) stacks, got {p.shape} vs {g.shape}")
    p = p.astype(bool)
    g = g.astype(bool)
    inter = np.einsum("ijc->c", (p & g).astype(np.int64))
    sizes = p.sum(axis=(0, 1)) + g.sum(axis=(0, 1))
    with np.errstate(invalid="ignore", divide="ignore"):
        dice = np.where(sizes > 0, 2.0 * inter / sizes, np.nan)
    return dice


@dataclass
class DiceSummary:
    """Dice aggregated over (image, channel) pairs with teeth present."""

    per_fdi: np.ndarray  # (32,), nan where no image had the tooth
    per_type: dict  # tooth type -> mean dice
    overall: float


def summarize_dice(per_image_dice) -> DiceSummary:
    """Aggregate per-image per-channel Dice arrays into per-tooth, per-type,
    and overall means over all included (image, channel) pairs."""
    stack = np.asarray(list(per_image_dice), dtype=np.float64).reshape(-1, NUM_TEETH)
    per_fdi = np.array([_nanmean(stack[:, c]) for c in range(NUM_TEETH)])
    per_type = {t: _nanmean(stack[:, list(CHANNELS_BY_TYPE[t])].ravel()) for t in TOOTH_TYPES}
    return DiceSummary(per_fdi=per_fdi, per_type=per_type, overall=_nanmean(stack.ravel()))


@dataclass
class MetricsReport:
    """Everything a single evaluation run produces."""

    dice: DiceSummary
    detection: DetectionMetrics | None = None
    split: str | None = None
    n_images: int = 0
    seed: int | None = None


def _clean(value):
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def report_to_dict(report: MetricsReport) -> dict:
    """JSON-ready dict with a stable key layout (tooth types in report order)."""
    out = {
        "schema_version": 1,
        "split": report.split,
        "n_images": report.n_images,
        "seed": report.seed,
        "segmentation": {
            "dice_overall": _clean(report.dice.overall),
            "dice_per_category": {f"{t}s": _clean(report.dice.per_type[t]) for t in TOOTH_TYPES},
            "dice_per_fdi": {
                str(fdi): _clean(float(report.dice.per_fdi[channel_of_fdi(fdi)]))
                for fdi in ALL_FDI_CODES
            },
        },
    }
    det = report.detection
    if det is None:
        out["detection"] = None
    else:
        out["detection"] = {
            "map": _clean(det.map),
            "ap50": _clean(det.ap50),
            "accuracy": _clean(det.accuracy),
            "mean_precision": _clean(det.mean_precision),
            "mean_recall": _clean(det.mean_recall),
            "ap_by_iou": {f"{k:.2f}": _clean(v) for k, v in sorted(det.ap_by_iou.items())},
            "per_class": {
                str(fdi): {
                    "precision": _clean(float(det.precision[channel_of_fdi(fdi)])),
                    "recall": _clean(float(det.recall[channel_of_fdi(fdi)])),
                    "ap50": _clean(float(det.ap50_per_class[channel_of_fdi(fdi)])),
                }
                for fdi in ALL_FDI_CODES
            },
        }
    return out


def write_report_json(report: MetricsReport, path) -> None:
    with open(path, "w") as fh:
        json.dump(report_to_dict(report), fh, indent=2)
        fh.write("\n")


def _fmt(value) -> str:
    return "" if value is None or (isinstance(value, float) and not np.isfinite(value)) else f"{value:.6f}"


def write_per_class_csv(report: MetricsReport, path) -> None:
    """One row per FDI code: dice plus (when present) detection scores."""
    det = report.detection
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fdi", "tooth_type", "dice", "precision", "recall", "ap50"])
        for fdi in ALL_FDI_CODES:
            c = channel_of_fdi(fdi)
            writer.writerow(
                [
                    fdi,
                    tooth_type(fdi),
                    _fmt(float(report.dice.per_fdi[c])),
                    _fmt(float(det.precision[c])) if det else "",
                    _fmt(float(det.recall[c])) if det else "",
                    _fmt(float(det.ap50_per_class[c])) if det else "",
                ]
            )


def write_confusion_csv(confusion: np.ndarray, path) -> None:
    """Confusion matrix as a CSV grid; last row counts unclassified teeth."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["predicted\\truth"] + [str(f) for f in ALL_FDI_CODES])
        for r in range(NUM_TEETH):
            writer.writerow([str(fdi_of_channel(r))] + [int(v) for v in confusion[r]])
        writer.writerow(["unclassified"] + [int(v) for v in confusion[UNCLASSIFIED_ROW]])
