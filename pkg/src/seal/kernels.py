"""Kernel backend selection.

The compiled extension is preferred when importable; the numpy fallback
keeps the package functional in pure-Python environments. Set
``SEAL_KERNEL_BACKEND=numpy`` (or ``cython``) to force a backend.
"""

from __future__ import annotations

import logging
import os

from seal import _kernels_np

log = logging.getLogger(__name__)

_forced = os.environ.get("SEAL_KERNEL_BACKEND", "").lower()

_ext = None
if _forced != "numpy":
    try:
        from seal import _kernels as _ext
    except ImportError:
        if _forced == "cython":
            raise
        log.info("compiled kernels unavailable, using numpy fallback")

BACKEND = "cython" if _ext is not None else "numpy"


def get_backend(name: str | None = None):
    """Return the kernel module for `name` (or the active default)."""
    if name in (None, "auto"):
        return _ext if _ext is not None else _kernels_np
    if name == "numpy":
        return _kernels_np
    if name == "cython":
        if _ext is None:
            raise RuntimeError("compiled kernels are not built")
        return _ext
    raise ValueError(f"unknown kernel backend {name!r}")


def voxel_accumulate(grid, xs, ys, tstar, ps):
    get_backend().voxel_accumulate(grid, xs, ys, tstar, ps)


def roi_pool_batch(feat, boxes_f, weights, grid: int = 7):
    return get_backend().roi_pool_batch(feat, boxes_f, weights, grid)
