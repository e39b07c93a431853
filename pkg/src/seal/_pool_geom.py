"""Shared geometry for mask-weighted RoI pooling.

Everything here is resolution bookkeeping: exact area overlaps between bin
grids and pixel rasters (via integral images; bilinear evaluation of the
integral of a piecewise-constant mask is exact), adaptive bilinear sample
positions, and the flattened (index, coefficient) taps that make pooling a
single gather-and-dot, which is what the differentiable path needs.
"""

from __future__ import annotations

import math

import numpy as np

POOL_GRID = 7
# Resampled weights below this are rounded to zero; an all-zero weight grid
# is the deliberate dead-mask outcome.
DEAD_EPS = 1e-6


def _integral_image(mask: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    s = np.zeros((h + 1, w + 1), dtype=np.float64)
    s[1:, 1:] = np.cumsum(np.cumsum(mask.astype(np.float64), axis=0), axis=1)
    return s


def _eval_integral(s: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Bilinear evaluation of the integral image at real coordinates; exact
    for piecewise-constant sources. Returns (len(ys), len(xs))."""
    h, w = s.shape[0] - 1, s.shape[1] - 1
    yc = np.clip(ys, 0.0, float(h))
    xc = np.clip(xs, 0.0, float(w))
    yi = np.minimum(yc.astype(np.int64), h - 1)
    xi = np.minimum(xc.astype(np.int64), w - 1)
    fy = yc - yi
    fx = xc - xi
    rows = s[yi, :] * (1.0 - fy)[:, None] + s[yi + 1, :] * fy[:, None]
    return rows[:, xi] * (1.0 - fx)[None, :] + rows[:, xi + 1] * fx[None, :]


def _grid_areas(s: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Covered area inside each rectangle of the (ys, xs) corner grid."""
    vals = _eval_integral(s, ys, xs)
    return vals[1:, 1:] - vals[:-1, 1:] - vals[1:, :-1] + vals[:-1, :-1]


def area_resample(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Exact area-fraction downsample of a binary H x W mask to out_h x out_w."""
    h, w = mask.shape
    if (h, w) == (out_h, out_w):
        return (mask != 0).astype(np.float64)
    s = _integral_image(mask)
    ys = np.linspace(0.0, float(h), out_h + 1)
    xs = np.linspace(0.0, float(w), out_w + 1)
    return _grid_areas(s, ys, xs) / ((h / out_h) * (w / out_w))


def downsample_mask_binary(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Binarizing downsample: output cell set iff covered area fraction >= 0.5.

    This is what makes small masks vanish at feature resolution (dead masks);
    the fractional `area_resample` never loses them.
    """
    return area_resample(mask, out_h, out_w) >= 0.5


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Tight inclusive (x_min, y_min, x_max, y_max) of a non-empty mask."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("mask is empty")
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def bbox_to_feature_box(bbox_px, in_h: int, in_w: int, feat_h: int, feat_w: int):
    """Inclusive pixel bbox -> continuous [x0, y0, x1, y1) box in feature coords."""
    x0, y0, x1, y1 = bbox_px
    sx = feat_w / in_w
    sy = feat_h / in_h
    return (x0 * sx, y0 * sy, (x1 + 1) * sx, (y1 + 1) * sy)


def box_bin_weights(low_mask: np.ndarray, box_f, grid: int = POOL_GRID) -> np.ndarray:
    """Area-resample a feature-resolution mask onto the box's grid x grid bins."""
    x0, y0, x1, y1 = box_f
    bin_area = ((y1 - y0) / grid) * ((x1 - x0) / grid)
    if bin_area <= 0.0:
        return np.zeros((grid, grid), dtype=np.float64)
    s = _integral_image(low_mask)
    ys = np.linspace(y0, y1, grid + 1)
    xs = np.linspace(x0, x1, grid + 1)
    w = _grid_areas(s, ys, xs) / bin_area
    w[w < DEAD_EPS] = 0.0
    return w


def box_sample_positions(box_f, grid: int = POOL_GRID):
    """Adaptive sample grid over the box: ceil(bin_extent) samples per bin axis.

    Sampling density grows with the box size in feature pixels, which is the
    property that makes pooling on upscaled feature maps expensive.
    """
    x0, y0, x1, y1 = box_f
    bh = (y1 - y0) / grid
    bw = (x1 - x0) / grid
    ny = max(1, math.ceil(bh))
    nx = max(1, math.ceil(bw))
    ys = y0 + (np.arange(grid * ny, dtype=np.float64) + 0.5) * (bh / ny)
    xs = x0 + (np.arange(grid * nx, dtype=np.float64) + 0.5) * (bw / nx)
    return ys, xs, ny, nx


def bilinear_axis_taps(positions: np.ndarray, n_cells: int):
    """Per-position (low index, high index, low weight, high weight) taps.

    Positions are continuous coordinates with cell centers at i + 0.5;
    positions more than one cell outside the raster contribute zero.
    """
    u = positions - 0.5
    valid = (u >= -1.0) & (u <= float(n_cells))
    uc = np.clip(u, 0.0, n_cells - 1.0)
    low = np.minimum(uc.astype(np.int64), n_cells - 1)
    high = np.minimum(low + 1, n_cells - 1)
    frac = uc - low
    w_low = np.where(valid, 1.0 - frac, 0.0)
    w_high = np.where(valid, frac, 0.0)
    return low, high, w_low, w_high


def pool_taps(box_f, bin_weights: np.ndarray, feat_h: int, feat_w: int,
              grid: int = POOL_GRID):
    """Flattened gather taps so pooled = feat.reshape(C, -1)[:, idx] @ coeff.

    Coefficients already include per-bin sample averaging and the final
    mask-weight normalization. Empty for dead masks.
    """
    total = bin_weights.sum()
    if total <= 0.0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.float64)
    ys, xs, ny, nx = box_sample_positions(box_f, grid)
    yl, yh, wyl, wyh = bilinear_axis_taps(ys, feat_h)
    xl, xh, wxl, wxh = bilinear_axis_taps(xs, feat_w)
    sy = np.repeat(bin_weights / (ny * nx * total), ny, axis=0)   # (grid*ny, grid)
    s = np.repeat(sy, nx, axis=1)                                  # (grid*ny, grid*nx)
    idx_parts, coeff_parts = [], []
    for yi, wy in ((yl, wyl), (yh, wyh)):
        for xi, wx in ((xl, wxl), (xh, wxh)):
            coeff_parts.append((wy[:, None] * wx[None, :] * s).ravel())
            idx_parts.append((yi[:, None] * feat_w + xi[None, :]).ravel())
    idx = np.concatenate(idx_parts)
    coeff = np.concatenate(coeff_parts)
    keep = coeff != 0.0
    return idx[keep], coeff[keep]
