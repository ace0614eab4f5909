"""Regularized Dice loss.

Per channel n over M pixels, with prediction P in [0, 1] and binary target G:

    dice_n = (2 * sum_i P G + eps) / (sum_i P^2 + sum_i G^2 + eps)
    loss   = mean_n (1 - dice_n) + lam * mse(P, G)

The squared-error term regularizes against overfitting on the packed,
low-contrast structures this loss is used for.  ``eps`` defines the
empty-vs-empty channel: both sides all-zero contribute 0, so images with
absent teeth are not penalized on their empty channels.

Two equivalent implementations are provided: a numpy one returning the loss
value together with its hand-derived gradient w.r.t. the prediction (used for
gradient verification), and a torch module for training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

MSE_MODES = ("mean", "sum")


@dataclass(frozen=True)
class LossConfig:
    """Loss hyperparameters.

    ``lam`` weighs the squared-error regularizer (0 disables it); ``eps``
    smooths the Dice ratio.  ``mse_mode`` selects how the squared-error term
    is normalized: "mean" averages over channels and pixels, making ``lam``
    resolution independent; "sum" keeps the raw per-channel pixel sum
    (averaged over channels only).
    """

    lam: float = 0.1
    eps: float = 1e-6
    mse_mode: str = "mean"

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"lam must be finite and >= 0, got {self.lam}")
        if not np.isfinite(self.eps) or self.eps <= 0:
            raise ValueError(f"eps must be finite and > 0, got {self.eps}")
        if self.mse_mode not in MSE_MODES:
            raise ValueError(f"mse_mode must be one of {MSE_MODES}, got {self.mse_mode!r}")


def regularized_dice_loss(pred, truth, config: LossConfig = LossConfig()):
    """Loss value and analytic gradient w.r.t. ``pred``.

    Args:
        pred: (H, W, C) float array of per-channel probabilities in [0, 1].
        truth: (H, W, C) binary array of the same shape.
        config: see :class:`LossConfig`.

    Returns:
        (loss, grad) with ``loss`` a float >= 0 and ``grad`` an (H, W, C)
        float64 array of d loss / d pred.
    """
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(truth, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs truth {g.shape}")
    if p.ndim != 3:
        raise ValueError(f"expected (H, W, C) tensors, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or not np.all(np.isfinite(g)):
        raise ValueError("non-finite values in loss inputs")
    if p.min() < -1e-9 or p.max() > 1 + 1e-9:
        raise ValueError("pred values must lie in [0, 1]")
    if not np.all((g == 0) | (g == 1)):
        raise ValueError("truth must be binary")

    n_channels = p.shape[2]
    n_pixels = p.shape[0] * p.shape[1]
    eps, lam = config.eps, config.lam

    inter = np.einsum("ijc,ijc->c", p, g)
    p_sq = np.einsum("ijc,ijc->c", p, p)
    g_sq = np.einsum("ijc,ijc->c", g, g)
    num = 2.0 * inter + eps
    den = p_sq + g_sq + eps
    dice_term = float(np.mean(1.0 - num / den))

    diff = p - g
    if config.mse_mode == "mean":
        mse = float(np.mean(diff**2))
        mse_grad = 2.0 * diff / (n_channels * n_pixels)
    else:
        mse = float(np.sum(diff**2)) / n_channels
        mse_grad = 2.0 * diff / n_channels

    # d/dP of -(num/den) per channel: -(2 G den - num * 2 P) / den^2
    dice_grad = -(2.0 * g * den - num * 2.0 * p) / den**2 / n_channels
    loss = dice_term + lam * mse
    grad = dice_grad + lam * mse_grad
    return loss, grad


class RegularizedDiceLoss(torch.nn.Module):
    """Torch version of :func:`regularized_dice_loss` for (N, C, H, W) batches.

    Per-sample losses use the same per-channel Dice terms and squared-error
    normalization, then average over the batch.  Gradients come from autograd
    and agree with the numpy analytic gradient.
    """

    def __init__(self, config: LossConfig = LossConfig()):
        super().__init__()
        self.config = config

    def forward(self, pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        if pred.shape != target.shape or pred.ndim != 4:
            raise ValueError(
                f"expected matching (N, C, H, W) tensors, got {tuple(pred.shape)} "
                f"vs {tuple(target.shape)}"
            )
        eps, lam = self.config.eps, self.config.lam
        inter = (pred * target).sum(dim=(2, 3))
        p_sq = (pred * pred).sum(dim=(2, 3))
        g_sq = (target * target).sum(dim=(2, 3))
        dice = (2.0 * inter + eps) / (p_sq + g_sq + eps)
        dice_term = (1.0 - dice).mean(dim=1)

        diff = pred - target
        if self.config.mse_mode == "mean":
            mse = diff.pow(2).mean(dim=(1, 2, 3))
        else:
            mse = diff.pow(2).sum(dim=(2, 3)).mean(dim=1)
        return (dice_term + lam * mse).mean()
