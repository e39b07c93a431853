"""Deterministic synthetic scenes and teacher providers.

Desk-scale substitute for pretrained teachers: tiled scenes where every
mask carries a class, a pixel-feature provider emitting per-class base
vectors (+ optional Gaussian noise), a caption provider, and a text
encoder with an exact orthonormal basis over the known class names.

Two generators:
  * aligned scenes  - tile/cell aligned masks, clean pooling (training smoke
    tests, AP evaluation against a random-label baseline);
  * conflict scenes - two classes sharing feature cells plus sub-threshold
    "dead" masks, reproducing the pooled-feature failure modes that spatial
    encoding is meant to rescue.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from seal import rle
from seal.guidance import HierarchyLevel, MaskSet, TeacherProviders

CANONICAL_PHRASES = ("object", "things", "stuff", "texture")
BACKGROUND = "background"


class SynthConfigError(ValueError):
    pass


def _hash_seed(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def unit_vector_for_string(text: str, dim: int) -> np.ndarray:
    rng = np.random.default_rng(_hash_seed(text))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


class SynthTextEncoder:
    """Maps known class names to orthonormal basis columns, anything else to
    a hash-seeded unit vector. Reconstructable from its config dict so
    training and serving share one text space."""

    def __init__(self, class_names: list[str], dim: int, seed: int = 0,
                 template: str | None = None):
        if len(class_names) > dim:
            raise SynthConfigError(
                f"{len(class_names)} classes cannot get near-orthogonal bases in dim {dim}")
        self.class_names = list(class_names)
        self.dim = dim
        self.seed = seed
        self.template = template
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((dim, max(1, len(class_names)))))
        self._basis = {name: q[:, i].copy() for i, name in enumerate(class_names)}

    def __call__(self, text: str) -> np.ndarray:
        if self.template:
            text = self.template.format(text)
        if text in self._basis:
            return self._basis[text].copy()
        return unit_vector_for_string(text, self.dim)

    def config(self) -> dict:
        return {"classes": self.class_names, "dim": self.dim,
                "seed": self.seed, "template": self.template}

    @staticmethod
    def from_config(cfg: dict) -> "SynthTextEncoder":
        return SynthTextEncoder(cfg["classes"], cfg["dim"], cfg.get("seed", 0),
                                cfg.get("template"))


@dataclass
class SynthSceneConfig:
    width: int = 64
    height: int = 64
    cell: int = 8                  # student feature cell, in pixels
    tile_cells: int = 2            # aligned tiles are tile_cells x tile_cells cells
    n_classes: int = 3
    masks_per_class: int = 2
    dim: int = 16                  # guidance feature dim D
    sigma: float = 0.0
    teacher_upsample: int = 2      # teacher map resolution multiplier over cells
    conflict: bool = False

    @property
    def class_names(self) -> list[str]:
        return [f"class{k}" for k in range(self.n_classes)]

    def validate(self):
        if self.n_classes > self.dim:
            raise SynthConfigError(
                f"class count {self.n_classes} exceeds feature dim {self.dim}")
        if self.width % self.cell or self.height % self.cell:
            raise SynthConfigError("frame must be a whole number of cells")


@dataclass
class SynthScene:
    config: SynthSceneConfig
    frame_id: str
    image: np.ndarray                         # H x W x 3 uint8
    mask_sets: dict[HierarchyLevel, MaskSet]
    mask_classes: dict[HierarchyLevel, list[str]]
    semantic_map: np.ndarray                  # H x W class indices
    class_table: list[str]                    # scene classes + background
    providers: TeacherProviders
    text_encoder: SynthTextEncoder


_PALETTE = np.array(
    [[196, 78, 62], [70, 140, 200], [110, 180, 90], [220, 180, 60],
     [150, 100, 190], [90, 190, 180], [200, 120, 170], [160, 160, 160]],
    dtype=np.uint8)


def _render_image(semantic_map: np.ndarray, n_classes: int, rng) -> np.ndarray:
    img = np.zeros(semantic_map.shape + (3,), dtype=np.int16)
    for k in range(n_classes + 1):
        color = _PALETTE[k % len(_PALETTE)] if k < n_classes else np.array([30, 30, 34])
        img[semantic_map == k] = color
    img += rng.integers(-10, 11, size=img.shape, dtype=np.int16)
    return np.clip(img, 0, 255).astype(np.uint8)


def _make_providers(cfg: SynthSceneConfig, semantic_map: np.ndarray,
                    mask_class_lookup, rng) -> tuple[TeacherProviders, SynthTextEncoder]:
    """Providers closed over the generated layout; fully deterministic."""
    th = (cfg.height // cfg.cell) * cfg.teacher_upsample
    tw = (cfg.width // cfg.cell) * cfg.teacher_upsample
    encoder = SynthTextEncoder(cfg.class_names, cfg.dim, seed=_hash_seed(f"basis-{cfg.n_classes}-{cfg.dim}"))
    bases = np.stack([encoder(name) for name in cfg.class_names])

    # Per teacher cell: majority class of the underlying pixels (background -> zero).
    ch, cw = cfg.height // th, cfg.width // tw
    cell_class = np.full((th, tw), cfg.n_classes, dtype=np.int64)
    for i in range(th):
        for j in range(tw):
            block = semantic_map[i * ch:(i + 1) * ch, j * cw:(j + 1) * cw]
            fg = block[block < cfg.n_classes]
            if fg.size:
                cell_class[i, j] = np.bincount(fg).argmax()
    fmap = np.zeros((cfg.dim, th, tw), dtype=np.float64)
    for k in range(cfg.n_classes):
        fmap[:, cell_class == k] = bases[k][:, None]
    fmap += cfg.sigma * rng.standard_normal(fmap.shape)

    def pixel_feature(image: np.ndarray) -> np.ndarray:
        return fmap.copy()

    def caption(image: np.ndarray, mask: np.ndarray):
        name = mask_class_lookup(mask)
        ys, xs = np.nonzero(mask)
        return name, (f"a synthetic {name} region of {len(ys)} pixels "
                      f"near ({int(xs.mean())}, {int(ys.mean())})")

    return TeacherProviders(pixel_feature, caption, encoder), encoder


def _lookup_by_majority(semantic_map: np.ndarray, class_table: list[str]):
    def lookup(mask: np.ndarray) -> str:
        vals = semantic_map[mask.astype(bool)]
        return class_table[int(np.bincount(vals).argmax())]
    return lookup


def make_aligned_scene(seed: int, cfg: SynthSceneConfig, frame_id: str = "0") -> SynthScene:
    """Tiled scene: tiles are instances, class unions are semantic masks,
    tile quadrants are parts. Everything is cell-aligned, so no mask dies
    at feature resolution."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    tile = cfg.cell * cfg.tile_cells
    rows, cols = cfg.height // tile, cfg.width // tile
    n_tiles = rows * cols
    need = cfg.n_classes * cfg.masks_per_class
    if n_tiles < need:
        raise SynthConfigError(f"grid has {n_tiles} tiles, need {need}")
    classes = np.array([k % cfg.n_classes for k in range(n_tiles)])
    rng.shuffle(classes)

    semantic_map = np.zeros((cfg.height, cfg.width), dtype=np.int64)
    inst_masks, inst_cls, part_masks, part_cls = [], [], [], []
    for t in range(n_tiles):
        r, c = divmod(t, cols)
        y0, x0 = r * tile, c * tile
        k = int(classes[t])
        semantic_map[y0:y0 + tile, x0:x0 + tile] = k
        m = np.zeros((cfg.height, cfg.width), dtype=np.uint8)
        m[y0:y0 + tile, x0:x0 + tile] = 1
        inst_masks.append(rle.encode(m))
        inst_cls.append(cfg.class_names[k])
        half = tile // 2
        for qy in (0, 1):
            for qx in (0, 1):
                q = np.zeros_like(m)
                q[y0 + qy * half:y0 + (qy + 1) * half,
                  x0 + qx * half:x0 + (qx + 1) * half] = 1
                part_masks.append(rle.encode(q))
                part_cls.append(cfg.class_names[k])

    sem_masks, sem_cls = [], []
    for k in range(cfg.n_classes):
        m = (semantic_map == k).astype(np.uint8)
        if m.any():
            sem_masks.append(rle.encode(m))
            sem_cls.append(cfg.class_names[k])

    class_table = cfg.class_names + [BACKGROUND]
    mask_sets = {
        HierarchyLevel.SEMANTIC: MaskSet(HierarchyLevel.SEMANTIC, sem_masks, frame_id),
        HierarchyLevel.INSTANCE: MaskSet(HierarchyLevel.INSTANCE, inst_masks, frame_id),
        HierarchyLevel.PART: MaskSet(HierarchyLevel.PART, part_masks, frame_id),
    }
    mask_classes = {
        HierarchyLevel.SEMANTIC: sem_cls,
        HierarchyLevel.INSTANCE: inst_cls,
        HierarchyLevel.PART: part_cls,
    }
    providers, encoder = _make_providers(
        cfg, semantic_map, _lookup_by_majority(semantic_map, class_table), rng)
    image = _render_image(semantic_map, cfg.n_classes, rng)
    return SynthScene(cfg, frame_id, image, mask_sets, mask_classes,
                      semantic_map, class_table, providers, encoder)


def make_conflict_scene(seed: int, cfg: SynthSceneConfig, frame_id: str = "0") -> SynthScene:
    """Two-class scene engineered for pooled-feature failure.

    Each conflict unit is a 2 x 2 cell region holding one mask of each
    class: class0 a tall narrow strip (half the left column), class1 a wide
    flat strip (half the top row). Both binarize to two live feature cells
    and share the corner cell, whose events mix both classes, so pooled
    features conflate the pair while the box shapes (tall vs wide) stay
    class-characteristic. Dead cells host sub-threshold speckles with the
    same shape coding. A background mask keeps per-level coverage valid and
    is excluded from evaluation.
    """
    cfg.validate()
    if cfg.n_classes != 2:
        raise SynthConfigError("conflict scenes are two-class by construction")
    rng = np.random.default_rng(seed)
    cs = cfg.cell
    cells_y, cells_x = cfg.height // cs, cfg.width // cs
    units = [(r, c) for r in range(1, cells_y - 2, 2) for c in range(1, cells_x - 2, 2)]
    picks = rng.choice(len(units), size=3, replace=False)
    conflict_units = [units[i] for i in picks[:2]]
    dead_unit = units[picks[2]]

    semantic_map = np.full((cfg.height, cfg.width), 2, dtype=np.int64)  # background
    masks, classes = [], []

    def add(m: np.ndarray, k: int):
        masks.append(rle.encode(m))
        classes.append(cfg.class_names[k])
        semantic_map[m.astype(bool)] = k

    # Strip thickness: comfortably above the 0.5-coverage binarization
    # threshold so live conflict masks stay live under predicted-mask noise.
    thick = cs * 3 // 4
    for (r, c) in conflict_units:
        y0, x0 = r * cs, c * cs
        m1 = np.zeros((cfg.height, cfg.width), dtype=np.uint8)
        m1[y0:y0 + thick, x0:x0 + 2 * cs] = 1          # wide flat strip: class1
        add(m1, 1)
        m0 = np.zeros_like(m1)
        m0[y0:y0 + 2 * cs, x0:x0 + thick] = 1          # tall narrow strip: class0
        add(m0, 0)                                      # paints the crossing region
    r0, c0 = dead_unit
    d0 = np.zeros((cfg.height, cfg.width), dtype=np.uint8)
    d0[r0 * cs:r0 * cs + 4, c0 * cs:c0 * cs + 2] = 1   # tall speckle: class0
    add(d0, 0)
    d1 = np.zeros_like(d0)
    y1, x1 = (r0 + 1) * cs, (c0 + 1) * cs
    d1[y1:y1 + 2, x1:x1 + 4] = 1                       # wide speckle: class1
    add(d1, 1)

    covered = np.zeros((cfg.height, cfg.width), dtype=bool)
    for m in masks:
        covered |= rle.decode(m).astype(bool)
    background = (~covered).astype(np.uint8)
    bg_rle = rle.encode(background)

    class_table = cfg.class_names + [BACKGROUND]
    inst = MaskSet(HierarchyLevel.INSTANCE, masks + [bg_rle], frame_id)
    inst_cls = classes + [BACKGROUND]
    sem_masks, sem_cls = [], []
    for k in range(2):
        m = (semantic_map == k).astype(np.uint8)
        sem_masks.append(rle.encode(m))
        sem_cls.append(cfg.class_names[k])
    sem_masks.append(bg_rle)
    sem_cls.append(BACKGROUND)
    mask_sets = {
        HierarchyLevel.SEMANTIC: MaskSet(HierarchyLevel.SEMANTIC, sem_masks, frame_id),
        HierarchyLevel.INSTANCE: inst,
        HierarchyLevel.PART: MaskSet(HierarchyLevel.PART, list(inst.masks), frame_id),
    }
    mask_classes = {
        HierarchyLevel.SEMANTIC: sem_cls,
        HierarchyLevel.INSTANCE: inst_cls,
        HierarchyLevel.PART: list(inst_cls),
    }

    def lookup(mask: np.ndarray) -> str:
        vals = semantic_map[mask.astype(bool)]
        # Conflict masks straddle nothing (each sits in its own class region),
        # so a plain majority is stable here too.
        return class_table[int(np.bincount(vals).argmax())]

    providers, encoder = _make_providers(cfg, semantic_map, lookup, rng)
    image = _render_image(semantic_map, cfg.n_classes, rng)
    return SynthScene(cfg, frame_id, image, mask_sets, mask_classes,
                      semantic_map, class_table, providers, encoder)


def synth_guidance(seed: int, cfg: SynthSceneConfig):
    """(image, mask sets, providers) for one deterministic synthetic frame."""
    scene = (make_conflict_scene if cfg.conflict else make_aligned_scene)(seed, cfg)
    return scene.image, scene.mask_sets, scene.providers


# --------------------------------------------------------------------------
# synthetic event streams
# --------------------------------------------------------------------------

def scene_events(scene: SynthScene, seed: int, window_us: int = 25_000,
                 rate: float = 0.6):
    """Class-coded event stream for a scene.

    Each class has a characteristic density and polarity signature, so a
    voxel grid of the window carries enough signal to tell classes apart:
    class0 positive, class1 negative, class2 alternating by pixel parity;
    background emits sparse noise.
    """
    from seal.events import EventStream

    cfg = scene.config
    rng = np.random.default_rng(seed)
    xs, ys, ps = [], [], []
    for k in range(cfg.n_classes):
        region = np.argwhere(scene.semantic_map == k)
        if region.size == 0:
            continue
        density = rate * (1.0 + 0.5 * k)
        n = max(1, int(len(region) * density))
        idx = rng.integers(0, len(region), size=n)
        py, px = region[idx, 0], region[idx, 1]
        if k == 0:
            pol = np.ones(n, dtype=np.int64)
        elif k == 1:
            pol = -np.ones(n, dtype=np.int64)
        else:
            pol = np.where((px + py) % 2 == 0, 1, -1)
        xs.append(px)
        ys.append(py)
        ps.append(pol)
    bg = np.argwhere(scene.semantic_map == cfg.n_classes)
    if bg.size:
        n = max(1, int(len(bg) * rate * 0.05))
        idx = rng.integers(0, len(bg), size=n)
        xs.append(bg[idx, 1])
        ys.append(bg[idx, 0])
        ps.append(rng.choice([-1, 1], size=n))
    xs = np.concatenate(xs)
    ys = np.concatenate(ys)
    ps = np.concatenate(ps)
    ts = np.sort(rng.integers(0, window_us, size=len(xs)))
    return EventStream.from_arrays(xs, ys, ts, ps, cfg.width, cfg.height)
