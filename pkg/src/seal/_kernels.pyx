# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: voxel accumulation and mask-weighted RoI pooling.

Semantics mirror `seal._kernels_np`; this module exists because the
pooling loop dominates profiling runs with many masks on large maps.
"""

from libc.math cimport ceil

import numpy as np
cimport numpy as cnp

cnp.import_array()


def voxel_accumulate(double[:, :, ::1] grid,
                     long[::1] xs, long[::1] ys,
                     double[::1] tstar, double[::1] ps):
    cdef Py_ssize_t j, n = xs.shape[0]
    cdef int bins = grid.shape[0]
    cdef int b0
    cdef double w1
    for j in range(n):
        b0 = <int>tstar[j]
        if b0 > bins - 1:
            b0 = bins - 1
        w1 = tstar[j] - b0
        grid[b0, ys[j], xs[j]] += ps[j] * (1.0 - w1)
        if b0 + 1 < bins and w1 > 0.0:
            grid[b0 + 1, ys[j], xs[j]] += ps[j] * w1


def roi_pool_batch(double[:, :, ::1] feat, double[:, ::1] boxes_f,
                   double[:, :, ::1] weights, int grid=7):
    """Mask-weighted RoI-Align of N boxes over one C x Hf x Wf map.

    Adaptive sampling: ceil(bin extent) bilinear samples per bin axis, so
    the work per mask scales with its box area in feature pixels.
    """
    cdef int c = feat.shape[0]
    cdef int fh = feat.shape[1]
    cdef int fw = feat.shape[2]
    cdef Py_ssize_t n = boxes_f.shape[0]
    out_arr = np.zeros((n, c), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t m
    cdef int i, j, py, px, ch, ny, nx, yl, xl, yh, xh
    cdef double x0, y0, x1, y1, bh, bw, total, w, scale
    cdef double sy, sx, u, v, fy, fx, w00, w01, w10, w11
    with nogil:
        for m in range(n):
            x0 = boxes_f[m, 0]
            y0 = boxes_f[m, 1]
            x1 = boxes_f[m, 2]
            y1 = boxes_f[m, 3]
            total = 0.0
            for i in range(grid):
                for j in range(grid):
                    total += weights[m, i, j]
            if total <= 0.0:
                continue
            bh = (y1 - y0) / grid
            bw = (x1 - x0) / grid
            ny = <int>ceil(bh)
            if ny < 1:
                ny = 1
            nx = <int>ceil(bw)
            if nx < 1:
                nx = 1
            for i in range(grid):
                for j in range(grid):
                    w = weights[m, i, j]
                    if w == 0.0:
                        continue
                    scale = w / (ny * nx) / total
                    for py in range(ny):
                        sy = y0 + (i * ny + py + 0.5) * bh / ny
                        u = sy - 0.5
                        if u < -1.0 or u > fh:
                            continue
                        if u < 0.0:
                            u = 0.0
                        if u > fh - 1.0:
                            u = fh - 1.0
                        yl = <int>u
                        yh = yl + 1 if yl + 1 < fh else fh - 1
                        fy = u - yl
                        for px in range(nx):
                            sx = x0 + (j * nx + px + 0.5) * bw / nx
                            v = sx - 0.5
                            if v < -1.0 or v > fw:
                                continue
                            if v < 0.0:
                                v = 0.0
                            if v > fw - 1.0:
                                v = fw - 1.0
                            xl = <int>v
                            xh = xl + 1 if xl + 1 < fw else fw - 1
                            fx = v - xl
                            w00 = scale * (1.0 - fy) * (1.0 - fx)
                            w01 = scale * (1.0 - fy) * fx
                            w10 = scale * fy * (1.0 - fx)
                            w11 = scale * fy * fx
                            for ch in range(c):
                                out[m, ch] += (feat[ch, yl, xl] * w00
                                               + feat[ch, yl, xh] * w01
                                               + feat[ch, yh, xl] * w10
                                               + feat[ch, yh, xh] * w11)
    return out_arr
