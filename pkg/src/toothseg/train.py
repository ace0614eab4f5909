"""Stage-2 training: the detector is frozen (priors are plain inputs read
from a file or derived from ground truth), the segmentation network trains
with Adam on the regularized Dice loss, and the learning rate halves when
validation loss plateaus.

Also home to the evaluation pipeline (network predictions -> mask metrics,
prior detections -> detection metrics) and the comparison harness that
trains the baseline U-Net against the box-gated variant under identical
budgets, including degraded-prior sweeps.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import (
    DatasetManifest,
    PreprocessConfig,
    build_mask_stack,
    flip_sample,
    load_image,
    preprocess_image,
    scale_annotation,
)
from .detect import (
    DegradationSpec,
    DetectorThresholds,
    build_bbox_map,
    degrade,
    filter_detections,
    load_detections,
    oracle_detections,
)
from .fdi import HORIZONTAL, TOOTH_TYPES, VERTICAL
from .loss import LossConfig, RegularizedDiceLoss
from .metrics import MetricsReport, dice_score, evaluate_detections, summarize_dice
from .model import BoxGatedUNet, NetworkConfig, init_parameters, predict_mask, save_checkpoint

PRIOR_SOURCES = ("oracle", "detector-file", "none")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.0003
    first_moment_decay: float = 0.99
    second_moment_decay: float = 0.999
    batch_size: int = 2
    epochs: int = 60
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    seed: int = 0
    prior_source: str = "detector-file"
    augment_flips: bool = True
    grad_clip_norm: float = 5.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError("plateau_factor must be in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.plateau_patience < 1:
            raise ValueError("batch_size/epochs/plateau_patience out of range")
        if self.prior_source not in PRIOR_SOURCES:
            raise ValueError(f"prior_source must be one of {PRIOR_SOURCES}, got {self.prior_source!r}")


@dataclass
class Sample:
    """One preprocessed training/eval sample at working resolution."""

    image_id: str
    image: np.ndarray  # (H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W, 32) uint8
    prior: np.ndarray | None  # (H, W, 32) uint8, None in baseline mode
    category: int


def _degradation_for(spec: DegradationSpec, image_id: str) -> DegradationSpec:
    # stable per-image seed, independent of process hash randomization
    per_image = (spec.seed * 1000003 + zlib.crc32(image_id.encode())) % (2**31)
    return dataclasses.replace(spec, seed=per_image)


def resolve_priors(
    manifest: DatasetManifest,
    prior_source: str,
    detections_by_image: dict | None = None,
    thresholds: DetectorThresholds = DetectorThresholds(),
    degradation: DegradationSpec | None = None,
) -> dict | None:
    """Per-image detections in source-image coordinates, or None for baseline.

    Oracle priors come straight from the annotations; detector-file priors
    must cover every image.  Either kind passes the confidence/IoU filter
    and, when requested, the seeded degradation simulator.
    """
    if prior_source == "none":
        return None
    out = {}
    for entry in manifest.entries:
        if prior_source == "oracle":
            dets = oracle_detections(entry.annotations)
        elif prior_source == "detector-file":
            if detections_by_image is None or entry.image_id not in detections_by_image:
                raise ValueError(f"no detections supplied for image {entry.image_id!r}")
            dets = list(detections_by_image[entry.image_id])
        else:
            raise ValueError(f"unknown prior source {prior_source!r}")
        dets = filter_detections(dets, thresholds)
        if degradation is not None and not degradation.is_identity:
            dets = degrade(dets, _degradation_for(degradation, entry.image_id), (entry.height, entry.width))
        out[entry.image_id] = dets
    return out


def prepare_samples(
    manifest: DatasetManifest,
    images: dict | None = None,
    root=None,
    preprocess: PreprocessConfig = PreprocessConfig(),
    priors: dict | None = None,
) -> list:
    """Preprocess every manifest entry into a :class:`Sample`.

    Images come from the ``images`` dict (in-memory datasets) or are loaded
    from ``root``.  Annotations are rescaled to the working resolution and
    rasterized there; ``priors`` (source coordinates, from
    :func:`resolve_priors`) are rasterized into per-tooth box maps at the
    same resolution.
    """
    if images is None and root is None:
        raise ValueError("either images or root is required")
    th, tw = preprocess.target_resolution
    samples = []
    for entry in sorted(manifest.entries, key=lambda e: e.image_id):
        if images is not None and entry.image_id in images:
            raw = images[entry.image_id]
        else:
            raw = load_image(Path(root) / entry.file)
        image = preprocess_image(raw, preprocess)
        sx, sy = tw / entry.width, th / entry.height
        scaled = [scale_annotation(a, sx, sy) for a in entry.annotations]
        mask = build_mask_stack(scaled, (th, tw))
        prior = None
        if priors is not None:
            prior = build_bbox_map(priors[entry.image_id], (entry.height, entry.width), (th, tw))
        samples.append(Sample(entry.image_id, image, mask, prior, entry.category))
    return samples


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    learning_rate: float
    plateau_event: bool
    dice_overall: float
    dice_by_type: dict


@dataclass
class TrainResult:
    model: BoxGatedUNet  # loaded with the best-validation-loss weights
    history: list
    best_epoch: int
    best_val_loss: float
    steps: int


HISTORY_FIELDS = (
    "epoch",
    "train_loss",
    "val_loss",
    "learning_rate",
    "plateau_event",
    "dice_overall",
    "dice_incisor",
    "dice_canine",
    "dice_premolar",
    "dice_molar",
)


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_FIELDS)
        for rec in history:
            writer.writerow(
                [
                    rec.epoch,
                    f"{rec.train_loss:.6f}",
                    f"{rec.val_loss:.6f}",
                    f"{rec.learning_rate:.8f}",
                    int(rec.plateau_event),
                    f"{rec.dice_overall:.6f}",
                ]
                + [f"{rec.dice_by_type[t]:.6f}" for t in TOOTH_TYPES]
            )


def read_history_csv(path) -> list:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                EpochStats(
                    epoch=int(row["epoch"]),
                    train_loss=float(row["train_loss"]),
                    val_loss=float(row["val_loss"]),
                    learning_rate=float(row["learning_rate"]),
                    plateau_event=bool(int(row["plateau_event"])),
                    dice_overall=float(row["dice_overall"]),
                    dice_by_type={t: float(row[f"dice_{t}"]) for t in TOOTH_TYPES},
                )
            )
    return out


def _to_tensors(batch, augment_rng=None):
    """Stack samples into network tensors, optionally with random flips.

    Flips remap mask and prior channels so labels stay anatomically correct.
    Two uniform draws happen per sample regardless of outcome, keeping the
    random stream aligned across configurations.
    """
    images, targets, priors = [], [], []
    has_prior = batch[0].prior is not None
    for sample in batch:
        image, mask, prior = sample.image, sample.mask, sample.prior
        if augment_rng is not None:
            u_h, u_v = augment_rng.random(2)
            if u_h < 0.5:
                image, mask, prior = flip_sample(image, mask, prior, HORIZONTAL)
            if u_v < 0.5:
                image, mask, prior = flip_sample(image, mask, prior, VERTICAL)
        background = 1 - mask.any(axis=2, keepdims=True).astype(np.float32)
        target = np.concatenate([mask.astype(np.float32), background], axis=2)
        images.append(image[None])
        targets.append(np.moveaxis(target, 2, 0))
        if has_prior:
            priors.append(np.moveaxis(prior.astype(np.float32), 2, 0))
    image_t = torch.from_numpy(np.stack(images))
    target_t = torch.from_numpy(np.stack(targets))
    prior_t = torch.from_numpy(np.stack(priors)) if has_prior else None
    return image_t, target_t, prior_t


def _val_pass(model, samples, criterion, batch_size):
    model.eval()
    losses = []
    dices = []
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            batch = samples[i : i + batch_size]
            image_t, target_t, prior_t = _to_tensors(batch)
            probs = model(image_t, prior_t)
            losses.append(float(criterion(probs, target_t)))
            for j, sample in enumerate(batch):
                pred = predict_mask(np.moveaxis(probs[j].numpy(), 0, 2))
                dices.append(dice_score(pred, sample.mask))
    summary = summarize_dice(dices)
    return float(np.mean(losses)), summary


def train_stage2(
    train_samples,
    val_samples,
    net_config: NetworkConfig = NetworkConfig(),
    train_config: TrainConfig = TrainConfig(),
    loss_config: LossConfig = LossConfig(),
    out_dir=None,
) -> TrainResult:
    """Train the segmentation network; returns the best-validation checkpoint.

    Priors are inputs only: nothing propagates back into the detection stage.
    Deterministic given seed and configs.  When ``out_dir`` is given, writes
    ``checkpoints/best.pt``, ``checkpoints/last.pt``, and ``history.csv``.
    """
    if not train_samples or not val_samples:
        raise ValueError("train and validation splits must be nonempty")
    if train_config.prior_source == "none":
        if any(s.prior is not None for s in train_samples + val_samples):
            raise ValueError("baseline mode expects samples without prior maps")
    else:
        missing = [s.image_id for s in train_samples + val_samples if s.prior is None]
        if missing:
            raise ValueError(f"prior maps missing for images: {missing[:5]}")

    torch.manual_seed(train_config.seed)
    model = BoxGatedUNet(net_config)
    init_parameters(model, train_config.seed)
    criterion = RegularizedDiceLoss(loss_config)
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=train_config.learning_rate,
        betas=(train_config.first_moment_decay, train_config.second_moment_decay),
    )

    history = []
    best_val = float("inf")
    best_state = copy.deepcopy(model.state_dict())
    best_epoch = 0
    stale_epochs = 0
    lr = train_config.learning_rate
    steps = 0
    for epoch in range(1, train_config.epochs + 1):
        rng = np.random.default_rng([train_config.seed, epoch])
        order = rng.permutation(len(train_samples))
        augment_rng = rng if train_config.augment_flips else None
        model.train()
        epoch_losses = []
        for start in range(0, len(order), train_config.batch_size):
            batch = [train_samples[i] for i in order[start : start + train_config.batch_size]]
            image_t, target_t, prior_t = _to_tensors(batch, augment_rng)
            probs = model(image_t, prior_t)
            loss = criterion(probs, target_t)
            if not torch.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch}, step {steps} "
                    f"(batch starting with {batch[0].image_id!r})"
                )
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), train_config.grad_clip_norm)
            optimizer.step()
            steps += 1
            epoch_losses.append(float(loss))

        val_loss, dice = _val_pass(model, val_samples, criterion, train_config.batch_size)
        plateau_event = False
        if val_loss < best_val - 1e-12:
            best_val = val_loss
            best_state = copy.deepcopy(model.state_dict())
            best_epoch = epoch
            stale_epochs = 0
        else:
            stale_epochs += 1
            if stale_epochs >= train_config.plateau_patience:
                lr *= train_config.plateau_factor
                for group in optimizer.param_groups:
                    group["lr"] = lr
                stale_epochs = 0
                plateau_event = True
        history.append(
            EpochStats(
                epoch=epoch,
                train_loss=float(np.mean(epoch_losses)),
                val_loss=val_loss,
                learning_rate=lr,
                plateau_event=plateau_event,
                dice_overall=dice.overall,
                dice_by_type=dict(dice.per_type),
            )
        )

    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        model.eval()
        save_checkpoint(model, steps, out_dir / "checkpoints" / "last.pt")
        write_history_csv(history, out_dir / "history.csv")
    model.load_state_dict(best_state)
    model.eval()
    if out_dir is not None:
        save_checkpoint(model, steps, Path(out_dir) / "checkpoints" / "best.pt")
    return TrainResult(model=model, history=history, best_epoch=best_epoch, best_val_loss=best_val, steps=steps)


def evaluate(
    model: BoxGatedUNet,
    samples,
    manifest: DatasetManifest | None = None,
    priors: dict | None = None,
    split: str | None = None,
    seed: int | None = None,
    match_iou: float = 0.5,
) -> MetricsReport:
    """Eval-mode forward over ``samples`` plus detection metrics of the priors.

    Segmentation Dice compares predicted mask stacks against ground truth at
    working resolution.  When ``manifest`` and ``priors`` are given, the
    prior detections are scored against the annotations in source-image
    coordinates (confusion matrix, precision/recall, AP50, mAP).
    """
    model.eval()
    dices = []
    with torch.no_grad():
        for sample in samples:
            image_t, _, prior_t = _to_tensors([sample])
            probs = model(image_t, prior_t)
            pred = predict_mask(np.moveaxis(probs[0].numpy(), 0, 2))
            dices.append(dice_score(pred, sample.mask))
    detection = None
    if manifest is not None and priors is not None:
        gts = {e.image_id: list(e.annotations) for e in manifest.entries}
        detection = evaluate_detections(priors, gts, match_iou=match_iou)
    return MetricsReport(
        dice=summarize_dice(dices),
        detection=detection,
        split=split,
        n_images=len(samples),
        seed=seed,
    )


@dataclass
class ComparisonRow:
    model: str
    drop_rate: float | None
    seed: int
    dice_overall: float
    dice_by_type: dict


def compare_models(
    train_manifest: DatasetManifest,
    val_manifest: DatasetManifest,
    test_manifest: DatasetManifest,
    images: dict,
    net_config: NetworkConfig,
    train_config: TrainConfig,
    preprocess: PreprocessConfig,
    seeds,
    drop_rates=(0.0,),
    jitter_px: float = 0.0,
    false_positive_rate: float = 0.0,
) -> list:
    """Train baseline U-Net and box-gated variants under identical budgets.

    The baseline trains without priors; one gated variant trains (and is
    tested) per entry of ``drop_rates``, with oracle priors degraded at that
    rate.  Returns one :class:`ComparisonRow` per (variant, seed); use
    :func:`median_rows` to collapse seeds.
    """
    manifests = (train_manifest, val_manifest, test_manifest)
    baseline = tuple(prepare_samples(m, images=images, preprocess=preprocess) for m in manifests)

    def degraded_samples(spec):
        out = []
        for m in manifests:
            priors = resolve_priors(m, "oracle", degradation=spec)
            out.append(prepare_samples(m, images=images, preprocess=preprocess, priors=priors))
        return tuple(out)

    # identity degradation does not depend on the seed; prepare those once
    cache = {}
    rows = []
    for seed in seeds:
        config = dataclasses.replace(train_config, seed=int(seed), prior_source="none")
        result = train_stage2(baseline[0], baseline[1], net_config, config)
        report = evaluate(result.model, baseline[2], split="test")
        rows.append(ComparisonRow("unet", None, int(seed), report.dice.overall, dict(report.dice.per_type)))

        for rate in drop_rates:
            spec = DegradationSpec(
                drop_rate=float(rate),
                jitter_px=jitter_px,
                false_positive_rate=false_positive_rate,
                seed=int(seed),
            )
            key = (float(rate), None if spec.is_identity else int(seed))
            if key not in cache:
                cache[key] = degraded_samples(spec)
            variant = cache[key]
            config = dataclasses.replace(train_config, seed=int(seed), prior_source="oracle")
            result = train_stage2(variant[0], variant[1], net_config, config)
            report = evaluate(result.model, variant[2], split="test")
            rows.append(
                ComparisonRow(
                    "box-gated", float(rate), int(seed), report.dice.overall, dict(report.dice.per_type)
                )
            )
    return rows


def median_rows(rows) -> list:
    """Median over seeds for each (model, drop_rate) variant, keeping order."""
    groups = {}
    order = []
    for row in rows:
        key = (row.model, row.drop_rate)
        if key not in groups:
            order.append(key)
        groups.setdefault(key, []).append(row)
    out = []
    for key in order:
        group = groups[key]
        out.append(
            ComparisonRow(
                model=key[0],
                drop_rate=key[1],
                seed=-1,
                dice_overall=float(np.median([r.dice_overall for r in group])),
                dice_by_type={
                    t: float(np.median([r.dice_by_type[t] for r in group])) for t in TOOTH_TYPES
                },
            )
        )
    return out


def write_comparison_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "drop_rate", "seed", "dice_overall"] + [f"dice_{t}" for t in TOOTH_TYPES])
        for row in rows:
            writer.writerow(
                [
                    row.model,
                    "" if row.drop_rate is None else f"{row.drop_rate:.2f}",
                    row.seed,
                    f"{row.dice_overall:.6f}",
                ]
                + [f"{row.dice_by_type[t]:.6f}" for t in TOOTH_TYPES]
            )


# ---------------------------------------------------------------------------
# flat key-value config files

_CONFIG_CLASSES = (TrainConfig, NetworkConfig, PreprocessConfig, LossConfig)


def _parse_value(raw: str, annotation, default):
    raw = raw.strip()
    if raw.lower() in ("none", "null"):
        return None
    base = type(default) if default is not None else annotation
    if base is bool or isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        return tuple(int(v) if float(v) == int(float(v)) else float(v) for v in raw.split(","))
    if isinstance(default, int) and not isinstance(default, bool):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if default is None:  # e.g. bb_levels
        return int(raw)
    return raw


def load_config_file(path):
    """Parse a flat ``key = value`` file into the four config dataclasses.

    Keys are the dataclass field names (unique across TrainConfig,
    NetworkConfig, PreprocessConfig, LossConfig); unknown keys are rejected.
    Returns (TrainConfig, NetworkConfig, PreprocessConfig, LossConfig).
    """
    raw = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ValueError(f"{path}:{line_no}: expected 'key = value', got {line.rstrip()!r}")
            key, value = (part.strip() for part in stripped.split("=", 1))
            raw[key] = value

    kwargs = {cls: {} for cls in _CONFIG_CLASSES}
    known = {}
    for cls in _CONFIG_CLASSES:
        for f in dataclasses.fields(cls):
            known[f.name] = (cls, f)
    for key, value in raw.items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        cls, f = known[key]
        default = f.default if f.default is not dataclasses.MISSING else None
        kwargs[cls][key] = _parse_value(value, f.type, default)
    return tuple(cls(**kwargs[cls]) for cls in _CONFIG_CLASSES)


def save_config_file(path, train_config, net_config, preprocess, loss_config) -> None:
    """Write every config field as ``key = value`` (the file round-trips)."""
    with open(path, "w") as fh:
        for cls_name, cfg in (
            ("training", train_config),
            ("network", net_config),
            ("preprocessing", preprocess),
            ("loss", loss_config),
        ):
            fh.write(f"# {cls_name}\n")
            for f in dataclasses.fields(cfg):
                value = getattr(cfg, f.name)
                if isinstance(value, tuple):
                    value = ",".join(str(v) for v in value)
                fh.write(f"{f.name} = {value}\n")
            fh.write("\n")
