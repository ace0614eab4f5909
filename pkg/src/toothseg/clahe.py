"""Contrast-limited adaptive histogram equalization for float grayscale images.

Straight implementation of the classic tile-based scheme: per-tile histogram,
clipping with uniform redistribution of the excess, midpoint-CDF mappings,
and bilinear interpolation between the four surrounding tile mappings so tile
boundaries stay invisible.  Everything is plain numpy and fully deterministic.
"""

from __future__ import annotations

import numpy as np

NBINS = 256


def clahe(image: np.ndarray, clip_limit: float = 0.02, tile_grid=(8, 8)) -> np.ndarray:
    """Equalize a grayscale image in [0, 1] with contrast limiting.

    ``clip_limit`` is the normalized per-bin ceiling: each tile's histogram is
    clipped at ``clip_limit * pixels_per_tile`` counts (floored at one count)
    and the clipped excess is redistributed uniformly over all bins.  Larger
    values allow more contrast; 1.0 disables clipping in practice.

    Args:
        image: (H, W) float array with finite values in [0, 1].
        clip_limit: normalized clip limit, > 0.
        tile_grid: (rows, cols) of the tile grid; must divide H and W.

    Returns:
        (H, W) float64 array in [0, 1].
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-d grayscale image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite pixels")
    if clip_limit <= 0:
        raise ValueError(f"clip_limit must be > 0, got {clip_limit}")
    height, width = img.shape
    rows, cols = int(tile_grid[0]), int(tile_grid[1])
    if rows < 1 or cols < 1 or height % rows or width % cols:
        raise ValueError(f"tile grid {tile_grid} does not divide image shape {img.shape}")
    th, tw = height // rows, width // cols

    bins = np.clip((img * NBINS).astype(np.int64), 0, NBINS - 1)

    # per-tile clipped histograms -> midpoint-CDF mappings into [0, 1]
    tile_pixels = th * tw
    clip = max(clip_limit * tile_pixels, 1.0)
    maps = np.empty((rows, cols, NBINS), dtype=np.float64)
    for i in range(rows):
        for j in range(cols):
            tile = bins[i * th : (i + 1) * th, j * tw : (j + 1) * tw]
            hist = np.bincount(tile.ravel(), minlength=NBINS).astype(np.float64)
            excess = np.maximum(hist - clip, 0.0).sum()
            hist = np.minimum(hist, clip) + excess / NBINS
            cdf = np.cumsum(hist)
            maps[i, j] = (cdf - hist / 2.0) / tile_pixels

    # bilinear blend of the four nearest tile mappings, clamped at the border
    ty = (np.arange(height) + 0.5) / th - 0.5
    tx = (np.arange(width) + 0.5) / tw - 0.5
    i0 = np.clip(np.floor(ty).astype(np.int64), 0, rows - 1)
    j0 = np.clip(np.floor(tx).astype(np.int64), 0, cols - 1)
    i1 = np.minimum(i0 + 1, rows - 1)
    j1 = np.minimum(j0 + 1, cols - 1)
    wy = np.clip(ty - i0, 0.0, 1.0)[:, None]
    wx = np.clip(tx - j0, 0.0, 1.0)[None, :]

    i0g = i0[:, None]
    i1g = i1[:, None]
    j0g = j0[None, :]
    j1g = j1[None, :]
    out = (
        maps[i0g, j0g, bins] * (1 - wy) * (1 - wx)
        + maps[i0g, j1g, bins] * (1 - wy) * wx
        + maps[i1g, j0g, bins] * wy * (1 - wx)
        + maps[i1g, j1g, bins] * wy * wx
    )
    return np.clip(out, 0.0, 1.0)
