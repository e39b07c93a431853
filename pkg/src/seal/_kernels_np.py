"""Vectorized numpy fallback for the compiled kernels.

Matches `seal._kernels` semantics; selected automatically when the
extension is not built (see `seal.kernels`).
"""

from __future__ import annotations

import numpy as np

from seal._pool_geom import POOL_GRID, bilinear_axis_taps, box_sample_positions


def voxel_accumulate(grid: np.ndarray, xs: np.ndarray, ys: np.ndarray,
                     tstar: np.ndarray, ps: np.ndarray) -> None:
    """Scatter triangular-kernel event weights into grid[b, y, x] in place."""
    bins = grid.shape[0]
    b0 = np.minimum(tstar.astype(np.int64), bins - 1)
    w1 = tstar - b0
    w0 = 1.0 - w1
    np.add.at(grid, (b0, ys, xs), ps * w0)
    upper = b0 + 1
    keep = (upper < bins) & (w1 > 0.0)
    np.add.at(grid, (upper[keep], ys[keep], xs[keep]), ps[keep] * w1[keep])


def _pool_one(feat: np.ndarray, box_f, weights: np.ndarray, grid: int) -> np.ndarray:
    total = weights.sum()
    c, fh, fw = feat.shape
    if total <= 0.0:
        return np.zeros(c, dtype=np.float64)
    ys, xs, ny, nx = box_sample_positions(box_f, grid)
    yl, yh, wyl, wyh = bilinear_axis_taps(ys, fh)
    xl, xh, wxl, wxh = bilinear_axis_taps(xs, fw)
    vals = (
        feat[:, yl[:, None], xl[None, :]] * (wyl[:, None] * wxl[None, :])
        + feat[:, yl[:, None], xh[None, :]] * (wyl[:, None] * wxh[None, :])
        + feat[:, yh[:, None], xl[None, :]] * (wyh[:, None] * wxl[None, :])
        + feat[:, yh[:, None], xh[None, :]] * (wyh[:, None] * wxh[None, :])
    )
    bins = vals.reshape(c, grid, ny, grid, nx).mean(axis=(2, 4))
    return (bins * weights[None]).sum(axis=(1, 2)) / total


def roi_pool_batch(feat: np.ndarray, boxes_f: np.ndarray, weights: np.ndarray,
                   grid: int = POOL_GRID) -> np.ndarray:
    """Mask-weighted RoI-Align of N boxes over one C x Hf x Wf map."""
    feat = np.ascontiguousarray(feat, dtype=np.float64)
    out = np.empty((boxes_f.shape[0], feat.shape[0]), dtype=np.float64)
    for i in range(boxes_f.shape[0]):
        out[i] = _pool_one(feat, boxes_f[i], weights[i], grid)
    return out
