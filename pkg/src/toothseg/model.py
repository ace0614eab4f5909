"""Segmentation networks: a U-Net backbone whose skip connections can be
gated by per-tooth bounding-box prior maps.

The building block is Conv -> ReLU -> BatchNorm -> SpatialDropout (in that
order).  The encoder stacks two blocks and a 2x max-pool per level; skip
tensors are the pooled encoder outputs, so the level-x skip lives at
H/2^x with ``base_filters * 2^(x-1)`` channels.  A box gate takes the
full-resolution (H, W, 32) prior map, max-pools it x times onto the skip
grid (binary maps stay binary under max-pooling), applies two 3x3
convolutions and a sigmoid, and multiplies the result into the skip
element-wise.  The decoder concatenates the (gated) skip, applies two
blocks, and upsamples with a stride-2 transposed convolution; a final
block at full resolution feeds a 1x1 convolution with channel softmax.

With no prior map the gates are bypassed and the network is exactly a
baseline U-Net: given shared weights the two modes produce bit-identical
outputs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .fdi import NUM_TEETH

CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture hyperparameters.

    ``bb_levels`` counts how many skip levels (from the top) carry box
    gates; None means all of them.  ``out_channels`` includes the explicit
    background channel: tooth channels 0..31 plus background at index 32 by
    default.
    """

    depth: int = 4
    base_filters: int = 64
    bb_levels: int | None = None
    in_channels: int = 1
    bbox_channels: int = NUM_TEETH
    out_channels: int = NUM_TEETH + 1
    drop_rate: float = 0.12

    def __post_init__(self):
        if self.depth < 1 or self.base_filters < 1:
            raise ValueError("depth and base_filters must be >= 1")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValueError(f"drop_rate must be in [0, 1), got {self.drop_rate}")
        if self.bb_levels is not None and not 0 <= self.bb_levels <= self.depth:
            raise ValueError(f"bb_levels must be in 0..depth, got {self.bb_levels}")

    @property
    def gate_levels(self) -> int:
        return self.depth if self.bb_levels is None else self.bb_levels

    def filters(self, level: int) -> int:
        """Channel count at encoder level ``level`` (1-based)."""
        return self.base_filters * 2 ** (level - 1)


class ConvBlock(nn.Module):
    """Conv(k, same padding) -> ReLU -> BatchNorm -> SpatialDropout."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3, drop_rate: float = 0.0):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {kernel}")
        self.conv = nn.Conv2d(in_channels, out_channels, kernel, padding=kernel // 2)
        # running stats keep 0.9 of the old value per train-mode batch
        self.norm = nn.BatchNorm2d(out_channels, momentum=0.1)
        self.drop = nn.Dropout2d(drop_rate)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.drop(self.norm(torch.relu(self.conv(x))))


class BoxGate(nn.Module):
    """Skip-connection gate driven by the bounding-box prior map.

    ``level`` determines how many 2x max-pools bring the full-resolution
    prior onto the skip grid.  Gate values are sigmoid outputs in (0, 1);
    an all-zero prior with zero conv biases gates uniformly at 0.5.
    """

    def __init__(self, level: int, bbox_channels: int, filters: int):
        super().__init__()
        self.level = level
        self.conv1 = nn.Conv2d(bbox_channels, filters, 3, padding=1)
        self.conv2 = nn.Conv2d(filters, filters, 3, padding=1)

    def gate_map(self, bbox_map: torch.Tensor) -> torch.Tensor:
        pooled = bbox_map
        for _ in range(self.level):
            pooled = torch.max_pool2d(pooled, 2)
        return torch.sigmoid(self.conv2(self.conv1(pooled)))

    def forward(self, bbox_map: torch.Tensor, encoder_out: torch.Tensor) -> torch.Tensor:
        gate = self.gate_map(bbox_map)
        if gate.shape[-2:] != encoder_out.shape[-2:]:
            raise ValueError(
                f"box gate level {self.level}: pooled prior {tuple(gate.shape[-2:])} does not "
                f"match encoder output {tuple(encoder_out.shape[-2:])}"
            )
        return encoder_out * gate


def _check_finite(tensor: torch.Tensor, where: str) -> None:
    if not torch.isfinite(tensor).all():
        raise FloatingPointError(f"non-finite activations at {where}")


class BoxGatedUNet(nn.Module):
    """U-Net with optional box-prior gating on the skip connections."""

    def __init__(self, config: NetworkConfig = NetworkConfig()):
        super().__init__()
        self.config = config
        depth, p = config.depth, config.drop_rate

        self.encoder = nn.ModuleList()
        ch = config.in_channels
        for level in range(1, depth + 1):
            f = config.filters(level)
            self.encoder.append(
                nn.Sequential(ConvBlock(ch, f, 3, p), ConvBlock(f, f, 3, p))
            )
            ch = f
        f_bottleneck = config.base_filters * 2**depth
        self.bottleneck = nn.Sequential(
            ConvBlock(ch, f_bottleneck, 3, p), ConvBlock(f_bottleneck, f_bottleneck, 3, p)
        )

        self.gates = nn.ModuleList(
            [
                BoxGate(level, config.bbox_channels, config.filters(level))
                for level in range(1, config.gate_levels + 1)
            ]
        )

        self.decoder = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        ch = f_bottleneck
        for level in range(depth, 0, -1):
            f = config.filters(level)
            self.decoder.append(nn.Sequential(ConvBlock(ch + f, f, 3, p), ConvBlock(f, f, 3, p)))
            up_out = config.filters(level - 1) if level > 1 else config.base_filters
            self.upsamplers.append(nn.ConvTranspose2d(f, up_out, 2, stride=2))
            ch = up_out
        self.final_block = ConvBlock(config.base_filters, config.base_filters, 3, p)
        self.head = nn.Conv2d(config.base_filters, config.out_channels, 1)

    def forward(self, image: torch.Tensor, bbox_map: torch.Tensor | None = None) -> torch.Tensor:
        """Per-pixel class probabilities of shape (N, out_channels, H, W).

        ``bbox_map`` is the (N, 32, H, W) binary prior; None bypasses the
        gates entirely (baseline U-Net mode).
        """
        cfg = self.config
        if image.ndim != 4 or image.shape[1] != cfg.in_channels:
            raise ValueError(f"expected image of shape (N, {cfg.in_channels}, H, W), got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        if h % 2**cfg.depth or w % 2**cfg.depth:
            raise ValueError(f"spatial dims {h}x{w} must be divisible by {2**cfg.depth}")
        if bbox_map is not None:
            if bbox_map.shape != (image.shape[0], cfg.bbox_channels, h, w):
                raise ValueError(
                    f"expected prior map of shape (N, {cfg.bbox_channels}, {h}, {w}), "
                    f"got {tuple(bbox_map.shape)}"
                )
        _check_finite(image, "network input")

        x = image
        skips = []
        for level, blocks in enumerate(self.encoder, start=1):
            x = torch.max_pool2d(blocks(x), 2)
            _check_finite(x, f"encoder level {level}")
            skip = x
            if bbox_map is not None and level <= len(self.gates):
                skip = self.gates[level - 1](bbox_map, x)
            skips.append(skip)

        x = self.bottleneck(x)
        _check_finite(x, "bottleneck")
        for i, level in enumerate(range(cfg.depth, 0, -1)):
            x = torch.cat([x, skips[level - 1]], dim=1)
            x = self.decoder[i](x)
            x = self.upsamplers[i](x)
            _check_finite(x, f"decoder level {level}")
        x = self.final_block(x)
        return torch.softmax(self.head(x), dim=1)


def init_parameters(model: nn.Module, seed: int) -> None:
    """Deterministic fan-in-scaled normal init for convs; unit/zero for norms."""
    gen = torch.Generator().manual_seed(seed)
    for _, module in model.named_modules():
        if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
            fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
            std = (2.0 / fan_in) ** 0.5
            with torch.no_grad():
                module.weight.copy_(torch.randn(module.weight.shape, generator=gen) * std)
                if module.bias is not None:
                    module.bias.zero_()
        elif isinstance(module, nn.BatchNorm2d):
            module.reset_running_stats()
            with torch.no_grad():
                module.weight.fill_(1.0)
                module.bias.zero_()


def predict_mask(prob_map) -> np.ndarray:
    """Argmax an (H, W, C) probability map into a binary (H, W, 32) mask stack.

    Pixels whose argmax is the background channel (the last one) stay empty
    in every tooth channel; every other pixel is set in exactly one channel.
    """
    probs = np.asarray(prob_map)
    if probs.ndim != 3:
        raise ValueError(f"expected an (H, W, C) probability map, got shape {probs.shape}")
    winners = probs.argmax(axis=2)
    stack = np.zeros((probs.shape[0], probs.shape[1], NUM_TEETH), dtype=np.uint8)
    for c in range(NUM_TEETH):
        stack[:, :, c] = winners == c
    return stack


def save_checkpoint(model: BoxGatedUNet, step: int, path) -> None:
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT,
            "config": asdict(model.config),
            "state_dict": model.state_dict(),
            "step": int(step),
        },
        path,
    )


def load_checkpoint(path):
    """Load a checkpoint; returns (model, step).  Shape disagreements between
    the stored config and tensors are rejected with the offending keys."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format_version") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format: {payload.get('format_version')!r}")
    config = NetworkConfig(**payload["config"])
    model = BoxGatedUNet(config)
    try:
        model.load_state_dict(payload["state_dict"], strict=True)
    except RuntimeError as exc:
        raise ValueError(f"checkpoint does not match its config: {exc}") from exc
    model.eval()
    return model, payload["step"]
