"""Command-line pipeline: synth -> prepare -> train -> evaluate -> report,
plus the degraded-prior study.

Every subcommand takes ``--seed`` and is reproducible: identical inputs and
seed produce identical non-plot artifacts byte for byte.  The run directory
for ``train`` can also come from the ``TOOTHSEG_RUN_DIR`` environment
variable.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

from . import data as data_mod
from . import metrics as metrics_mod
from . import report as report_mod
from . import synth as synth_mod
from . import train as train_mod
from .detect import load_detections
from .loss import LossConfig
from .model import NetworkConfig, load_checkpoint


def _parse_mix(text):
    mix = {}
    for part in text.split(","):
        cat, _, weight = part.partition(":")
        mix[int(cat)] = float(weight) if weight else 1.0
    return mix


def _parse_pair(text):
    parts = [int(v) for v in text.split(",")]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected 'H,W', got {text!r}")
    return tuple(parts)


def _load_configs(args):
    if getattr(args, "config", None):
        train_cfg, net_cfg, pre_cfg, loss_cfg = train_mod.load_config_file(args.config)
    else:
        train_cfg, net_cfg, pre_cfg, loss_cfg = (
            train_mod.TrainConfig(),
            NetworkConfig(),
            data_mod.PreprocessConfig(),
            LossConfig(),
        )
    if getattr(args, "seed", None) is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    if getattr(args, "prior", None) is not None:
        train_cfg = dataclasses.replace(train_cfg, prior_source=args.prior)
    return train_cfg, net_cfg, pre_cfg, loss_cfg


def _resolve_split(manifest, split_name, seed):
    splits = data_mod.make_splits(manifest, seed=seed)
    try:
        return getattr(splits, split_name)
    except AttributeError:
        raise ValueError(f"unknown split {split_name!r} (train, val, test1, test2)") from None


def _priors_for(manifest, train_cfg, args):
    detections = None
    if train_cfg.prior_source == "detector-file":
        if not getattr(args, "detections", None):
            raise ValueError("--detections is required with --prior detector-file")
        detections = load_detections(args.detections)
    return train_mod.resolve_priors(manifest, train_cfg.prior_source, detections_by_image=detections)


def cmd_synth(args) -> int:
    mix = _parse_mix(args.mix) if args.mix else None
    manifest, images = synth_mod.generate_dataset(
        args.n, category_mix=mix, seed=args.seed, resolution=args.resolution, noise_level=args.noise
    )
    synth_mod.write_dataset(args.out, manifest, images)
    print(f"wrote {len(manifest.entries)} phantoms to {args.out}")
    return 0


def cmd_prepare(args) -> int:
    manifest = data_mod.load_manifest(args.data)
    issues = data_mod.validate_manifest(manifest)
    missing_files = [
        e.image_id for e in manifest.entries if not (Path(args.data) / e.file).exists()
    ]
    issues.extend(f"image file missing for {img}" for img in missing_files)
    if issues:
        print(f"validation FAILED with {len(issues)} issue(s):")
        for issue in issues:
            print(f"  - {issue}")
        return 1
    per_category = {}
    for entry in manifest.entries:
        per_category[entry.category] = per_category.get(entry.category, 0) + 1
    splits = data_mod.make_splits(manifest, seed=args.seed)
    print(f"validation passed: {len(manifest.entries)} images listed")
    for cat in sorted(per_category):
        print(f"  category {cat}: {per_category[cat]} images")
    print(
        f"splits at seed {args.seed}: train={len(splits.train.entries)} "
        f"val={len(splits.val.entries)} test1={len(splits.test1.entries)} "
        f"test2={len(splits.test2.entries)}"
    )
    return 0


def cmd_train(args) -> int:
    out = args.out or os.environ.get("TOOTHSEG_RUN_DIR")
    if not out:
        raise ValueError("--out (or TOOTHSEG_RUN_DIR) is required")
    out = Path(out)
    train_cfg, net_cfg, pre_cfg, loss_cfg = _load_configs(args)
    manifest = data_mod.load_manifest(args.data)
    splits = data_mod.make_splits(manifest, seed=train_cfg.seed)

    def build(split_manifest):
        priors = None
        if train_cfg.prior_source != "none":
            priors = _priors_for(split_manifest, train_cfg, args)
        return train_mod.prepare_samples(split_manifest, root=args.data, preprocess=pre_cfg, priors=priors)

    train_samples = build(splits.train)
    val_samples = build(splits.val)
    out.mkdir(parents=True, exist_ok=True)
    train_mod.save_config_file(out / "config.cfg", train_cfg, net_cfg, pre_cfg, loss_cfg)
    result = train_mod.train_stage2(train_samples, val_samples, net_cfg, train_cfg, loss_cfg, out_dir=out)
    report = train_mod.evaluate(
        result.model, val_samples, split="val", seed=train_cfg.seed
    )
    metrics_mod.write_report_json(report, out / "report.json")
    report_mod.render_report(result.history, report, out, model=result.model, samples=val_samples[:2])
    print(
        f"trained {train_cfg.epochs} epochs ({result.steps} steps); best val loss "
        f"{result.best_val_loss:.4f} at epoch {result.best_epoch}; run dir: {out}"
    )
    return 0


def cmd_evaluate(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    config_path = args.config or (Path(args.checkpoint).parent.parent / "config.cfg")
    if Path(config_path).exists():
        args.config = str(config_path)
    train_cfg, _, pre_cfg, _ = _load_configs(args)
    manifest = data_mod.load_manifest(args.data)
    split = _resolve_split(manifest, args.split, train_cfg.seed)
    priors = None
    if train_cfg.prior_source != "none":
        priors = _priors_for(split, train_cfg, args)
    samples = train_mod.prepare_samples(split, root=args.data, preprocess=pre_cfg, priors=priors)
    report = train_mod.evaluate(
        model, samples, manifest=split, priors=priors, split=args.split, seed=train_cfg.seed
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics_mod.write_report_json(report, out / "report.json")
    metrics_mod.write_per_class_csv(report, out / "per_class.csv")
    if report.detection is not None:
        metrics_mod.write_confusion_csv(report.detection.confusion, out / "confusion.csv")
        print(
            f"{args.split}: dice={report.dice.overall:.4f} "
            f"mAP={report.detection.map:.4f} AP50={report.detection.ap50:.4f}"
        )
    else:
        print(f"{args.split}: dice={report.dice.overall:.4f} (no detection priors)")
    return 0


def cmd_degrade_study(args) -> int:
    train_cfg, net_cfg, pre_cfg, _ = _load_configs(args)
    manifest = data_mod.load_manifest(args.data)
    splits = data_mod.make_splits(manifest, seed=train_cfg.seed)
    images = {
        e.image_id: data_mod.load_image(Path(args.data) / e.file) for e in manifest.entries
    }
    seeds = [int(s) for s in args.seeds.split(",")]
    rates = [float(r) for r in args.drop_rates.split(",")]
    rows = train_mod.compare_models(
        splits.train,
        splits.val,
        splits.test1,
        images,
        net_cfg,
        train_cfg,
        pre_cfg,
        seeds=seeds,
        drop_rates=rates,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_mod.write_comparison_csv(rows, out / "comparison_runs.csv")
    medians = train_mod.median_rows(rows)
    train_mod.write_comparison_csv(medians, out / "comparison_medians.csv")
    for row in medians:
        tag = row.model if row.drop_rate is None else f"{row.model}@drop{row.drop_rate:g}"
        print(f"{tag}: median dice {row.dice_overall:.4f}")
    return 0


def cmd_report(args) -> int:
    run = Path(args.run)
    history = []
    if (run / "history.csv").exists():
        history = train_mod.read_history_csv(run / "history.csv")
    report = None
    model = None
    samples = []
    if args.data and args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        config_path = args.config or (run / "config.cfg")
        if Path(config_path).exists():
            args.config = str(config_path)
        train_cfg, _, pre_cfg, _ = _load_configs(args)
        manifest = data_mod.load_manifest(args.data)
        split = _resolve_split(manifest, args.split, train_cfg.seed)
        priors = None
        if train_cfg.prior_source != "none":
            priors = _priors_for(split, train_cfg, args)
        samples = train_mod.prepare_samples(split, root=args.data, preprocess=pre_cfg, priors=priors)
        report = train_mod.evaluate(
            model, samples, manifest=split, priors=priors, split=args.split, seed=train_cfg.seed
        )
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        metrics_mod.write_report_json(report, out / "report.json")
        metrics_mod.write_per_class_csv(report, out / "summary.csv")
    written = report_mod.render_report(history, report, args.out, model=model, samples=samples)
    print(f"wrote {len(written)} figures to {Path(args.out) / 'plots'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="toothseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mix", type=str, default=None, help="cat:weight,... (default: corpus mix)")
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--resolution", type=_parse_pair, default=(512, 512))
    p.add_argument("--noise", type=float, default=0.03)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="validate a dataset directory")
    p.add_argument("data", type=str)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train the segmentation network")
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--prior", choices=train_mod.PRIOR_SOURCES, default=None)
    p.add_argument("--detections", type=str, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--split", type=str, default="test1")
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--prior", choices=train_mod.PRIOR_SOURCES, default=None)
    p.add_argument("--detections", type=str, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("degrade-study", help="baseline vs gated network under degraded priors")
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--seeds", type=str, default="0,1,2")
    p.add_argument("--drop-rates", dest="drop_rates", type=str, default="0,0.5,1.0")
    p.set_defaults(func=cmd_degrade_study)

    p = sub.add_parser("report", help="render plots and tables for a run")
    p.add_argument("--run", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--split", type=str, default="test1")
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--prior", choices=train_mod.PRIOR_SOURCES, default=None)
    p.add_argument("--detections", type=str, default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
