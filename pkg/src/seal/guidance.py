"""Hierarchical multimodal guidance: mask sets at three granularity levels,
per-mask visual features pooled from a teacher pixel-feature map, and text
features encoded from per-mask captions.

Teacher models (pixel features, captioning, text encoding) are pluggable
providers; anything deterministic with the right shapes plugs in.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from seal import rle
from seal._pool_geom import area_resample, mask_bbox

log = logging.getLogger(__name__)

COVERAGE_THRESHOLD = 0.95


class HierarchyLevel(enum.Enum):
    SEMANTIC = "s"
    INSTANCE = "i"
    PART = "p"


LEVELS = (HierarchyLevel.SEMANTIC, HierarchyLevel.INSTANCE, HierarchyLevel.PART)


class ProviderError(RuntimeError):
    """A teacher provider failed; carries the level/mask it failed on."""


@dataclass
class MaskSet:
    level: HierarchyLevel
    masks: list[dict]          # RLE-encoded binary masks
    frame_id: str

    def decode(self, index: int) -> np.ndarray:
        try:
            return rle.decode(self.masks[index])
        except rle.RleError as e:
            raise rle.RleError(f"level {self.level.value} mask {index}: {e}") from e

    def __len__(self) -> int:
        return len(self.masks)


@dataclass
class GuidanceRecord:
    mask_index: int
    visual_feature: np.ndarray
    text_feature: np.ndarray
    caption_short: str
    caption_long: str


@dataclass
class HierGuidance:
    frame_id: str
    mask_sets: dict[HierarchyLevel, MaskSet]
    records: dict[HierarchyLevel, list[GuidanceRecord]]

    def __post_init__(self):
        for level, ms in self.mask_sets.items():
            if len(self.records[level]) != len(ms):
                raise ValueError(
                    f"level {level.value}: {len(self.records[level])} records "
                    f"for {len(ms)} masks")


@dataclass
class TeacherProviders:
    """pixel_feature: image -> D x H2 x W2 map; caption: (image, mask) ->
    (short, long); text_encoder: string -> D vector."""

    pixel_feature: Callable[[np.ndarray], np.ndarray]
    caption: Callable[[np.ndarray, np.ndarray], tuple[str, str]]
    text_encoder: Callable[[str], np.ndarray]


@dataclass
class MaskSetReport:
    coverage: float
    overlap_pixels: int
    empty_masks: list[int]
    valid: bool


def validate_mask_set(ms: MaskSet, height: int, width: int,
                      coverage_threshold: float = COVERAGE_THRESHOLD) -> MaskSetReport:
    """Coverage / overlap / empty-mask report.

    A set is valid when its union covers at least the threshold fraction and
    no mask is empty; overlapping masks are reported but allowed.
    """
    counts = np.zeros((height, width), dtype=np.int32)
    empty = []
    for i in range(len(ms)):
        m = ms.decode(i)
        if m.shape != (height, width):
            raise rle.RleError(
                f"level {ms.level.value} mask {i}: decodes to {m.shape}, "
                f"expected {(height, width)}")
        if not m.any():
            empty.append(i)
        counts += m
    coverage = float(np.count_nonzero(counts) / counts.size)
    overlap = int(np.count_nonzero(counts >= 2))
    valid = coverage >= coverage_threshold and not empty
    return MaskSetReport(coverage, overlap, empty, valid)


def pool_pixel_features(feature_map: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mask-weighted mean of teacher feature columns.

    The mask is area-resampled to the feature resolution with fractional
    weights, so even a sub-cell mask keeps a nonzero footprint: the teacher
    side must never produce dead guidance. The bounding-box fallback exists
    only as a defensive branch.
    """
    if not mask.any():
        raise ValueError("mask is empty")
    d, h2, w2 = feature_map.shape
    weights = area_resample(mask, h2, w2)
    total = weights.sum()
    if total <= 0.0:  # unreachable for non-empty masks; keep the contract anyway
        x0, y0, x1, y1 = mask_bbox(mask)
        cy0 = int(y0 * h2 / mask.shape[0])
        cy1 = min(h2 - 1, int(y1 * h2 / mask.shape[0]))
        cx0 = int(x0 * w2 / mask.shape[1])
        cx1 = min(w2 - 1, int(x1 * w2 / mask.shape[1]))
        return feature_map[:, cy0:cy1 + 1, cx0:cx1 + 1].mean(axis=(1, 2))
    # Sum only the covered cells (scan order): congruent footprints over
    # identical features then pool bitwise-identically.
    nz = weights > 0.0
    w_nz = weights[nz]
    return (feature_map[:, nz] * w_nz).sum(axis=1) / w_nz.sum()


def boxes_from_masks(ms: MaskSet) -> list[tuple[int, int, int, int]]:
    """Tight inclusive (x_min, y_min, x_max, y_max) per mask."""
    boxes = []
    for i in range(len(ms)):
        m = ms.decode(i)
        if not m.any():
            raise ValueError(f"level {ms.level.value} mask {i} is empty")
        boxes.append(mask_bbox(m))
    return boxes


def build_guidance(image: np.ndarray, mask_sets: dict[HierarchyLevel, MaskSet],
                   providers: TeacherProviders) -> HierGuidance:
    """Assemble per-mask guidance records from the teacher providers.

    Short captions drive the text feature; long captions are stored verbatim
    for language fusion at training time.
    """
    fmap = providers.pixel_feature(image)
    frame_id = next(iter(mask_sets.values())).frame_id
    records: dict[HierarchyLevel, list[GuidanceRecord]] = {}
    for level in LEVELS:
        ms = mask_sets[level]
        recs = []
        for i in range(len(ms)):
            mask = ms.decode(i)
            try:
                v = pool_pixel_features(fmap, mask)
                short, long_caption = providers.caption(image, mask)
                t = providers.text_encoder(short)
            except Exception as e:
                raise ProviderError(
                    f"provider failed on level {level.value} mask {i}: {e}") from e
            recs.append(GuidanceRecord(i, np.asarray(v, dtype=np.float32),
                                       np.asarray(t, dtype=np.float32),
                                       short, long_caption))
        records[level] = recs
    return HierGuidance(frame_id, dict(mask_sets), records)


# --------------------------------------------------------------------------
# on-disk layout: masks_{s,i,p}.json, vfeat_{s,i,p}.bin, tfeat_{s,i,p}.bin,
# captions_{s,i,p}.json per frame directory
# --------------------------------------------------------------------------

def save_guidance(g: HierGuidance, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for level in LEVELS:
        tag = level.value
        ms = g.mask_sets[level]
        recs = g.records[level]
        (directory / f"masks_{tag}.json").write_text(json.dumps(ms.masks))
        np.stack([r.visual_feature for r in recs]).astype("<f4").tofile(
            directory / f"vfeat_{tag}.bin")
        np.stack([r.text_feature for r in recs]).astype("<f4").tofile(
            directory / f"tfeat_{tag}.bin")
        (directory / f"captions_{tag}.json").write_text(json.dumps(
            [{"short": r.caption_short, "long": r.caption_long} for r in recs]))


def load_guidance(directory, frame_id: str, feature_dim: int) -> HierGuidance:
    directory = Path(directory)
    mask_sets, records = {}, {}
    for level in LEVELS:
        tag = level.value
        masks = json.loads((directory / f"masks_{tag}.json").read_text())
        vfeat = np.fromfile(directory / f"vfeat_{tag}.bin", dtype="<f4")
        tfeat = np.fromfile(directory / f"tfeat_{tag}.bin", dtype="<f4")
        captions = json.loads((directory / f"captions_{tag}.json").read_text())
        k = len(masks)
        vfeat = vfeat.reshape(k, feature_dim)
        tfeat = tfeat.reshape(k, feature_dim)
        mask_sets[level] = MaskSet(level, masks, frame_id)
        records[level] = [
            GuidanceRecord(i, vfeat[i], tfeat[i],
                           captions[i]["short"], captions[i]["long"])
            for i in range(k)
        ]
    return HierGuidance(frame_id, mask_sets, records)
