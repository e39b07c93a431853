"""COCO-style uncompressed run-length encoding for binary masks.

Counts run in column-major (Fortran) order and start with the number of
zeros, so a mask beginning with a set pixel encodes as [0, n, ...].
"""

from __future__ import annotations

import numpy as np


class RleError(ValueError):
    pass


def encode(mask: np.ndarray) -> dict:
    """Encode a binary H x W array as {"size": [H, W], "counts": [...]}."""
    h, w = mask.shape
    flat = np.asfortranarray(mask != 0).ravel(order="F").astype(np.int8)
    if flat.size == 0:
        return {"size": [int(h), int(w)], "counts": []}
    changes = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0] == 1:
        counts = [0] + counts
    return {"size": [int(h), int(w)], "counts": counts}


def decode(rle: dict) -> np.ndarray:
    """Decode to a uint8 H x W array; raises RleError on malformed input."""
    try:
        h, w = (int(v) for v in rle["size"])
        counts = [int(c) for c in rle["counts"]]
    except (KeyError, TypeError, ValueError) as e:
        raise RleError(f"malformed RLE: {e}") from e
    if any(c < 0 for c in counts):
        raise RleError("negative run length")
    if sum(counts) != h * w:
        raise RleError(f"run lengths sum to {sum(counts)}, expected {h * w}")
    flat = np.zeros(h * w, dtype=np.uint8)
    pos = 0
    value = 0
    for c in counts:
        if value:
            flat[pos:pos + c] = 1
        pos += c
        value ^= 1
    return flat.reshape((h, w), order="F")


def area(rle: dict) -> int:
    return int(sum(rle["counts"][1::2]))
