"""Polygon and box rasterization onto pixel grids.

Conventions: a pixel at row r, column c owns the unit square
[c, c+1) x [r, r+1) and its center sits at (c + 0.5, r + 0.5) in (x, y)
coordinates.  A polygon covers a pixel iff the pixel center lies inside the
polygon under the even-odd rule, which makes rasterization deterministic and
directly checkable against a point-in-polygon oracle.
"""

from __future__ import annotations

import warnings

import numpy as np


def shoelace_area(polygon) -> float:
    """Unsigned area of a polygon given as an (K, 2) array of (x, y) vertices."""
    pts = np.asarray(polygon, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
        raise ValueError(f"polygon must be an (K>=3, 2) array, got shape {pts.shape}")
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _segments_intersect(p1, p2, p3, p4) -> bool:
    # proper intersection test via orientation signs
    d1 = np.cross(p4 - p3, p1 - p3)
    d2 = np.cross(p4 - p3, p2 - p3)
    d3 = np.cross(p2 - p1, p3 - p1)
    d4 = np.cross(p2 - p1, p4 - p1)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


def polygon_is_simple(polygon) -> bool:
    """True if no two non-adjacent edges properly intersect.

    Quadratic scan; annotation polygons have a few dozen vertices at most.
    """
    pts = np.asarray(polygon, dtype=np.float64)
    n = pts.shape[0]
    if n < 3:
        return False
    edges = [(pts[i], pts[(i + 1) % n]) for i in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            if j == i + 1 or (i == 0 and j == n - 1):
                continue  # adjacent edges share a vertex
            if _segments_intersect(*edges[i], *edges[j]):
                return False
    return True


def rasterize_polygon(polygon, resolution) -> np.ndarray:
    """Rasterize a polygon to a binary mask of shape ``resolution`` = (H, W).

    A pixel is set iff its center is inside the polygon (even-odd rule),
    implemented as a scanline parity count of edge crossings to the right of
    each pixel center.  Degenerate polygons (zero area) yield an all-zero
    mask with a warning.

    Args:
        polygon: (K, 2) array of (x, y) vertices, K >= 3.  Callers are
            expected to clip vertices into image bounds beforehand.
        resolution: (H, W) of the output mask.

    Returns:
        Boolean array of shape (H, W).
    """
    pts = np.asarray(polygon, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
        raise ValueError(f"polygon must be an (K>=3, 2) array, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("polygon has non-finite vertices")
    height, width = int(resolution[0]), int(resolution[1])
    mask = np.zeros((height, width), dtype=bool)
    if shoelace_area(pts) == 0.0:
        warnings.warn("degenerate polygon (zero area); rasterized as empty mask")
        return mask

    x1 = pts[:, 0]
    y1 = pts[:, 1]
    x2 = np.roll(x1, -1)
    y2 = np.roll(y1, -1)
    keep = y1 != y2  # horizontal edges never cross a scanline
    x1, y1, x2, y2 = x1[keep], y1[keep], x2[keep], y2[keep]
    if x1.size == 0:
        return mask

    ylo = np.minimum(y1, y2)
    yhi = np.maximum(y1, y2)
    row_lo = max(0, int(np.floor(ylo.min() - 0.5)))
    row_hi = min(height, int(np.ceil(yhi.max())) + 1)
    col_centers = np.arange(width) + 0.5
    slope = (x2 - x1) / (y2 - y1)
    for r in range(row_lo, row_hi):
        yc = r + 0.5
        hit = (ylo <= yc) & (yc < yhi)  # half-open: shared vertices count once
        if not hit.any():
            continue
        xs = np.sort(x1[hit] + (yc - y1[hit]) * slope[hit])
        right = xs.size - np.searchsorted(xs, col_centers, side="right")
        mask[r] = (right % 2) == 1
    return mask


def rasterize_box(bbox, resolution) -> np.ndarray:
    """Rasterize an (x, y, w, h) box: pixel set iff its center lies in the box.

    The box spans [x, x+w) x [y, y+h); integer boxes therefore cover exactly
    w*h pixels.  Out-of-bounds parts are clipped by the grid itself.
    """
    x, y, w, h = (float(v) for v in bbox)
    if w < 0 or h < 0:
        raise ValueError(f"box has negative size: {bbox!r}")
    height, width = int(resolution[0]), int(resolution[1])
    mask = np.zeros((height, width), dtype=bool)
    c0 = max(0, int(np.ceil(x - 0.5)))
    c1 = min(width, int(np.ceil(x + w - 0.5)))
    r0 = max(0, int(np.ceil(y - 0.5)))
    r1 = min(height, int(np.ceil(y + h - 0.5)))
    if c0 < c1 and r0 < r1:
        mask[r0:r1, c0:c1] = True
    return mask


def polygon_bbox(polygon) -> tuple[float, float, float, float]:
    """Tight (x, y, w, h) box around the polygon vertices, snapped outward to
    the integer pixel grid so it also covers every rasterized pixel."""
    pts = np.asarray(polygon, dtype=np.float64)
    x0 = float(np.floor(pts[:, 0].min()))
    y0 = float(np.floor(pts[:, 1].min()))
    x1 = float(np.ceil(pts[:, 0].max()))
    y1 = float(np.ceil(pts[:, 1].max()))
    return (x0, y0, x1 - x0, y1 - y0)
