"""Static report generation: training curves, confusion heatmap, per-category
Dice bars, and qualitative mask overlays.

All figures go through the Agg backend so report generation works headless;
file names are fixed so reruns overwrite in place.  Tables (CSV/JSON) are the
byte-stable artifacts; plot PNGs are for humans.
"""

from __future__ import annotations

import warnings
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .fdi import ALL_FDI_CODES, NUM_TEETH, TOOTH_TYPES, channel_of_fdi, fdi_of_channel
from .metrics import MetricsReport
from .model import predict_mask


def plot_loss_curves(history, path) -> bool:
    """Train/validation loss per epoch.  Returns False (and skips) if empty."""
    if not history:
        warnings.warn("empty history; loss curves skipped")
        return False
    epochs = [h.epoch for h in history]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(epochs, [h.train_loss for h in history], label="train")
    ax.plot(epochs, [h.val_loss for h in history], label="validation")
    for h in history:
        if h.plateau_event:
            ax.axvline(h.epoch, color="gray", alpha=0.3, linestyle=":")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title("training and validation loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def plot_dice_curves(history, path) -> bool:
    """Per-tooth-category validation Dice per epoch."""
    if not history:
        warnings.warn("empty history; dice curves skipped")
        return False
    epochs = [h.epoch for h in history]
    fig, ax = plt.subplots(figsize=(7, 4))
    for t in TOOTH_TYPES:
        ax.plot(epochs, [h.dice_by_type.get(t, float("nan")) for h in history], label=f"{t}s")
    ax.plot(epochs, [h.dice_overall for h in history], label="overall", color="black", linewidth=2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("dice")
    ax.set_ylim(0, 1)
    ax.set_title("validation dice by tooth category")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def plot_confusion(confusion: np.ndarray, path) -> None:
    """Heatmap of the 33x32 confusion matrix (last row = unclassified)."""
    fig, ax = plt.subplots(figsize=(10, 10))
    ax.imshow(confusion, cmap="viridis")
    labels = [str(f) for f in ALL_FDI_CODES]
    ax.set_xticks(range(NUM_TEETH), labels, rotation=90, fontsize=6)
    ax.set_yticks(range(NUM_TEETH + 1), labels + ["unclassified"], fontsize=6)
    ax.set_xlabel("ground truth")
    ax.set_ylabel("predicted")
    ax.set_title("detection confusion matrix")
    vmax = confusion.max() if confusion.size else 1
    for r in range(confusion.shape[0]):
        for c in range(confusion.shape[1]):
            v = int(confusion[r, c])
            if v:
                color = "white" if confusion[r, c] < 0.6 * vmax else "black"
                ax.text(c, r, str(v), ha="center", va="center", fontsize=5, color=color)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_category_dice(report: MetricsReport, path) -> None:
    """Bar chart of per-tooth-category Dice."""
    fig, ax = plt.subplots(figsize=(5, 4))
    values = [report.dice.per_type.get(t, float("nan")) for t in TOOTH_TYPES]
    ax.bar([f"{t}s" for t in TOOTH_TYPES], values, color="steelblue")
    ax.axhline(report.dice.overall, color="black", linestyle="--", label="overall")
    ax.set_ylim(0, 1)
    ax.set_ylabel("dice")
    ax.set_title("dice by tooth category")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_overlay(image: np.ndarray, mask_stack: np.ndarray, path, title: str = "") -> None:
    """X-ray with predicted mask contours and FDI labels drawn on top."""
    fig, ax = plt.subplots(figsize=(6, 6))
    ax.imshow(image, cmap="gray", vmin=0, vmax=1)
    cmap = plt.get_cmap("hsv")
    for c in range(NUM_TEETH):
        channel = mask_stack[:, :, c]
        if not channel.any():
            continue
        color = cmap((c * 7 % NUM_TEETH) / NUM_TEETH)
        ax.contour(channel, levels=[0.5], colors=[color], linewidths=0.8)
        rows, cols = np.nonzero(channel)
        ax.text(
            cols.mean(),
            rows.mean(),
            str(fdi_of_channel(c)),
            color=color,
            fontsize=6,
            ha="center",
            va="center",
        )
    ax.set_axis_off()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_report(
    history,
    report: MetricsReport | None,
    out_dir,
    model=None,
    samples=(),
    max_overlays: int = 4,
) -> list:
    """Write every applicable figure into ``out_dir / plots``.

    Returns the list of files written.  Empty inputs skip their figure with a
    notice instead of failing, so partial runs still render.
    """
    import torch

    plots = Path(out_dir) / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    written = []
    if plot_loss_curves(history, plots / "loss_curves.png"):
        written.append(plots / "loss_curves.png")
    if plot_dice_curves(history, plots / "dice_curves.png"):
        written.append(plots / "dice_curves.png")
    if report is not None:
        plot_category_dice(report, plots / "category_dice.png")
        written.append(plots / "category_dice.png")
        if report.detection is not None:
            plot_confusion(report.detection.confusion, plots / "confusion_matrix.png")
            written.append(plots / "confusion_matrix.png")
    if model is not None:
        from .train import _to_tensors

        model.eval()
        for i, sample in enumerate(samples[:max_overlays]):
            image_t, _, prior_t = _to_tensors([sample])
            with torch.no_grad():
                probs = model(image_t, prior_t)
            pred = predict_mask(np.moveaxis(probs[0].numpy(), 0, 2))
            path = plots / f"overlay_{i:02d}_{sample.image_id}.png"
            plot_overlay(sample.image, pred, path, title=sample.image_id)
            written.append(path)
    return written
