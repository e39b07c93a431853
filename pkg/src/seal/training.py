"""Two-stage optimization.

Stage 1 aligns the event backbone with a teacher pixel-feature map
(per-location cosine) and teaches the decoder to reproduce guidance masks
from box prompts. Stage 2 freezes backbone/decoder and trains the fusion
stack, spatial encoding, and mask feature enhancer against the hierarchical
guidance with the cosine distillation loss (visual + text terms, both
maskable for ablations).
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from seal import events as ev
from seal._pool_geom import area_resample, mask_bbox
from seal.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from seal.guidance import LEVELS, HierarchyLevel, load_guidance
from seal.model import EventSegmenter, ModelConfig, Prompt, pooling_coefficients
from seal.synthetic import SynthTextEncoder

log = logging.getLogger(__name__)

LEVEL_BY_TAG = {lv.value: lv for lv in LEVELS}


class DataError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 15_000
    batch_size: int = 8
    lr: float = 2e-4
    lr_decay: float = 0.9
    decay_epoch: int = 3
    seed: int = 0
    stage: int = 1
    use_visual: bool = True          # visual-guidance distillation term
    use_text: bool = True            # text-guidance distillation term
    levels: tuple[str, ...] = ("s", "i", "p")
    mask_bce_weight: float = 1.0     # stage-1 decoder supervision
    max_text_tokens: int = 32

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        bad = set(self.levels) - set(LEVEL_BY_TAG)
        if bad:
            raise ValueError(f"unknown levels {bad}")


@dataclass
class TrainLog:
    entries: list[dict] = field(default_factory=list)
    wall_seconds: float = 0.0
    checkpoint_path: str | None = None
    dead_features: int = 0

    def losses(self) -> list[float]:
        return [e["loss"] for e in self.entries]

    def save_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for e in self.entries:
                f.write(json.dumps(e) + "\n")


def lr_schedule(iteration: int, epoch: int, cfg: TrainConfig) -> float:
    """Initial rate until the decay epoch, then a single multiplicative decay."""
    return cfg.lr if epoch < cfg.decay_epoch else cfg.lr * cfg.lr_decay


def _cosine_terms(student: torch.Tensor, target: torch.Tensor):
    """Per-row (1 - cos); zero-norm student rows contribute exactly 1 with a
    dead-feature count instead of NaN."""
    sn = student.norm(dim=-1)
    tn = target.norm(dim=-1)
    ok = (sn > 0) & (tn > 0)
    terms = torch.ones_like(sn)
    if ok.any():
        s = student[ok] / sn[ok].unsqueeze(-1)
        t = target[ok] / tn[ok].unsqueeze(-1)
        terms = terms.clone()
        terms[ok] = 1.0 - (s * t).sum(dim=-1)
    dead = int((~ok).sum())
    return terms, dead


def distill_loss(student: dict, guidance_targets: dict, use_visual: bool = True,
                 use_text: bool = True, levels=("s", "i", "p")):
    """Sum over enabled levels of per-level mean (1 - cos) against visual and
    text guidance; student/guidance aligned by mask index within level.

    `student`: {level tag: (K_l, D) tensor}; `guidance_targets`:
    {level tag: (visual (K_l, D), text (K_l, D))} arrays or tensors.
    Returns (scalar tensor, dead feature count).
    """
    total = None
    dead_total = 0
    for tag in levels:
        if tag not in student:
            continue
        s = student[tag]
        v, t = guidance_targets[tag]
        v = torch.as_tensor(np.asarray(v), dtype=s.dtype)
        t = torch.as_tensor(np.asarray(t), dtype=s.dtype)
        if s.shape[0] != v.shape[0] or s.shape[0] != t.shape[0]:
            raise ValueError(f"level {tag}: student/guidance count mismatch")
        if s.shape[0] == 0:
            continue
        parts = []
        if use_visual:
            terms, dead = _cosine_terms(s, v)
            parts.append(terms.mean())
            dead_total += dead
        if use_text:
            terms, dead = _cosine_terms(s, t)
            parts.append(terms.mean())
            dead_total += dead
        for p in parts:
            total = p if total is None else total + p
    if total is None:
        total = torch.zeros((), dtype=torch.get_default_dtype())
    return total, dead_total


def stage1_align_loss(student_map: torch.Tensor, teacher_map: torch.Tensor):
    """Mean over spatial cells of (1 - cos(student column, teacher column))."""
    if student_map.shape != teacher_map.shape:
        raise ValueError("student/teacher maps must have equal shapes")
    s = student_map.flatten(1).T
    t = teacher_map.flatten(1).T
    terms, dead = _cosine_terms(s, t)
    return terms.mean(), dead


def fixed_projection(d_out: int, d_in: int) -> np.ndarray:
    """Deterministic orthonormal-ish projection for the stage-1 teacher."""
    rng = np.random.default_rng(0xD2)
    q, _ = np.linalg.qr(rng.standard_normal((max(d_out, d_in), min(d_out, d_in))))
    return q[:d_out, :] if d_out >= d_in else q[:, :d_out].T[:, :d_in]


# --------------------------------------------------------------------------
# dataset manifest
# --------------------------------------------------------------------------

@dataclass
class FrameRecord:
    frame_id: str
    events_path: Path
    image_path: Path
    guidance_dir: Path


@dataclass
class TrainManifest:
    root: Path
    width: int
    height: int
    voxel_bins: int
    window_us: int
    dim: int
    text_encoder_cfg: dict
    frames: list[FrameRecord]

    @staticmethod
    def load(path) -> "TrainManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        root = path.parent
        frames = [FrameRecord(f["frame_id"], root / f["events"],
                              root / f["image"], root / f["guidance"])
                  for f in doc["frames"]]
        return TrainManifest(
            root=root, width=doc["width"], height=doc["height"],
            voxel_bins=doc["voxel"]["bins"], window_us=doc["voxel"]["window_us"],
            dim=doc["dim"], text_encoder_cfg=doc["text_encoder"], frames=frames)

    def text_encoder(self) -> SynthTextEncoder:
        return SynthTextEncoder.from_config(self.text_encoder_cfg)


class _FrameCache:
    """Per-frame tensors that stay constant through a training run."""

    def __init__(self, manifest: TrainManifest, model: EventSegmenter,
                 cfg: TrainConfig, need_teacher: bool):
        self.records = []
        mc = model.config
        encoder = manifest.text_encoder()
        proj = None
        for fr in manifest.frames:
            if not fr.guidance_dir.exists():
                raise DataError(f"frame {fr.frame_id}: guidance directory missing")
            try:
                guidance = load_guidance(fr.guidance_dir, fr.frame_id, manifest.dim)
            except FileNotFoundError as e:
                raise DataError(f"frame {fr.frame_id}: incomplete guidance: {e}") from e
            stream = ev.load_events(fr.events_path)
            vcfg = ev.VoxelConfig(bins=manifest.voxel_bins, window_us=manifest.window_us,
                                  height=mc.input_size, width=mc.input_size)
            voxel = ev.normalize_voxel(ev.voxelize(stream, vcfg))
            voxel_t = torch.as_tensor(voxel.data, dtype=model.dtype)

            teacher_t = None
            if need_teacher:
                tfile = fr.guidance_dir / "teacher.bin"
                if not tfile.exists():
                    raise DataError(f"frame {fr.frame_id}: stage-1 teacher map missing")
                meta = json.loads((fr.guidance_dir / "teacher.json").read_text())
                tmap = np.fromfile(tfile, dtype="<f4").reshape(meta["shape"])
                if proj is None:
                    proj = fixed_projection(mc.d2, tmap.shape[0])
                h2 = mc.feat_size
                resampled = np.stack([area_resample(ch, h2, h2) for ch in tmap])
                teacher = np.tensordot(proj, resampled, axes=([1], [0]))
                teacher_t = torch.as_tensor(teacher, dtype=model.dtype)

            h2 = mc.feat_size
            masks, boxes, targets = {}, {}, {}
            coeff, alive, allow = {}, {}, {}
            captions = []
            for tag in cfg.levels:
                level = LEVEL_BY_TAG[tag]
                ms = guidance.mask_sets[level]
                recs = guidance.records[level]
                decoded = [ms.decode(i) for i in range(len(ms))]
                masks[tag] = decoded
                boxes[tag] = [mask_bbox(m) for m in decoded]
                targets[tag] = (
                    np.stack([r.visual_feature for r in recs]) if recs else np.zeros((0, manifest.dim)),
                    np.stack([r.text_feature for r in recs]) if recs else np.zeros((0, manifest.dim)),
                )
                c, a, al = pooling_coefficients(decoded, h2, h2)
                coeff[tag] = torch.as_tensor(c, dtype=model.dtype)
                alive[tag] = torch.as_tensor(a, dtype=model.dtype)
                allow[tag] = torch.as_tensor(al)
                captions.extend(r.caption_long for r in recs)
            text = np.stack([encoder(c) for c in captions[: cfg.max_text_tokens]]) \
                if captions else np.zeros((0, manifest.dim))
            self.records.append({
                "frame_id": fr.frame_id,
                "voxel": voxel_t,
                "teacher": teacher_t,
                "masks": masks,
                "boxes": boxes,
                "targets": targets,
                "coeff": coeff,
                "alive": alive,
                "allow": allow,
                "text": torch.as_tensor(text, dtype=model.dtype),
            })

    def __len__(self):
        return len(self.records)


def _frame_mask_features(model: EventSegmenter, rec: dict, feat_raw: torch.Tensor,
                         tokens_by_level: dict, cfg: TrainConfig):
    """Student M-hat per enabled level, pooled with the guidance image masks
    and spatial tokens from box prompts (the training-time protocol)."""
    fused = model.enhance(feat_raw, rec["text"])
    student = {}
    for tag in cfg.levels:
        tokens = tokens_by_level[tag]
        if tokens.shape[0] == 0:
            student[tag] = feat_raw.new_zeros((0, model.config.d))
            continue
        student[tag] = model.mask_features_batched(
            fused, tokens, rec["coeff"][tag], rec["alive"][tag], rec["allow"][tag])
    return student


def _decode_tokens(model: EventSegmenter, feat_raw: torch.Tensor, rec: dict,
                   cfg: TrainConfig, width: int, height: int):
    tokens = {}
    for tag in cfg.levels:
        lvl = []
        for (x0, y0, x1, y1) in rec["boxes"][tag]:
            preds = model.decode_masks(feat_raw, [Prompt.from_box(x0, y0, x1, y1)],
                                       width, height)
            lvl.append(preds[0].token)
        tokens[tag] = torch.stack(lvl) if lvl else feat_raw.new_zeros((0, model.config.d))
    return tokens


def train(manifest: TrainManifest | str, cfg: TrainConfig,
          model_config: ModelConfig | None = None,
          init_checkpoint: str | None = None,
          out_dir: str | None = None) -> tuple[Checkpoint, TrainLog]:
    """Run one training stage over the manifest; deterministic given the seed."""
    if isinstance(manifest, (str, Path)):
        manifest = TrainManifest.load(manifest)
    torch.manual_seed(cfg.seed)

    if cfg.stage == 2:
        if init_checkpoint is None:
            raise ValueError("stage 2 requires a stage-1 checkpoint (--init)")
        ckpt = init_checkpoint if isinstance(init_checkpoint, Checkpoint) \
            else load_checkpoint(init_checkpoint)
        if ckpt.meta.get("stage") not in (None, 1):
            log.warning("stage-2 init checkpoint is not tagged as stage 1")
        if model_config is not None:
            ckpt = Checkpoint(ckpt.arrays, model_config, ckpt.meta)
        model = ckpt.to_model()
    else:
        if model_config is None:
            raise ValueError("stage 1 requires a model config")
        model = EventSegmenter(model_config)
    model.train()
    mc = model.config

    frozen_prefixes = ("backbone.", "decoder.") if cfg.stage == 2 else ("fusion.", "se.", "mfe.")
    trainable = []
    for name, p in model.named_parameters():
        if name.startswith(frozen_prefixes):
            p.requires_grad_(False)
        else:
            p.requires_grad_(True)
            trainable.append(p)
    optimizer = torch.optim.Adam(trainable, lr=cfg.lr)

    cache = _FrameCache(manifest, model, cfg, need_teacher=(cfg.stage == 1))
    n = len(cache)
    iters_per_epoch = max(1, (n + cfg.batch_size - 1) // cfg.batch_size)
    rng = np.random.default_rng(cfg.seed)

    # Stage 2: backbone and decoder are frozen, so raw features and mask
    # tokens are constants; compute them once.
    static_feats, static_tokens = {}, {}
    if cfg.stage == 2:
        model.eval()
        with torch.no_grad():
            for i, rec in enumerate(cache.records):
                feat = model.encode_backbone(rec["voxel"])
                static_feats[i] = feat
                static_tokens[i] = _decode_tokens(model, feat, rec, cfg,
                                                  mc.input_size, mc.input_size)
        model.train()

    logbook = TrainLog()
    order = rng.permutation(n)
    cursor = 0
    start = time.monotonic()
    for it in range(cfg.iterations):
        epoch = it // iters_per_epoch + 1
        lr = lr_schedule(it, epoch, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr

        batch_idx = []
        for _ in range(min(cfg.batch_size, n)):
            if cursor >= n:
                order = rng.permutation(n)
                cursor = 0
            batch_idx.append(int(order[cursor]))
            cursor += 1

        optimizer.zero_grad()
        loss = torch.zeros((), dtype=model.dtype)
        dead = 0
        for i in batch_idx:
            rec = cache.records[i]
            if cfg.stage == 1:
                feat = model.encode_backbone(rec["voxel"])
                align, _ = stage1_align_loss(feat, rec["teacher"])
                frame_loss = align
                if cfg.mask_bce_weight > 0:
                    # Instance-level masks supervise the decoder when present.
                    tag = "i" if "i" in cfg.levels else cfg.levels[0]
                    masks = rec["masks"][tag]
                    pick = rng.integers(0, len(masks), size=min(2, len(masks)))
                    pad = mc.box_dilation_px
                    for k in pick:
                        x0, y0, x1, y1 = rec["boxes"][tag][int(k)]
                        _, logits = model.decoder(
                            feat, Prompt.from_box(x0, y0, x1, y1),
                            mc.input_size, mc.input_size)
                        # Supervise only the dilated box: that is the region
                        # the box-prompt contract constrains, and it keeps the
                        # positive/negative pixel balance sane.
                        ys = slice(max(0, y0 - pad), y1 + 1 + pad)
                        xs = slice(max(0, x0 - pad), x1 + 1 + pad)
                        target = torch.as_tensor(
                            masks[int(k)][ys, xs], dtype=model.dtype)
                        bce = torch.nn.functional.binary_cross_entropy_with_logits(
                            logits[0][ys, xs], target)
                        frame_loss = frame_loss + cfg.mask_bce_weight * bce / len(pick)
            else:
                feat = static_feats[i]
                student = _frame_mask_features(model, rec, feat, static_tokens[i], cfg)
                frame_loss, d = distill_loss(student, rec["targets"],
                                             cfg.use_visual, cfg.use_text, cfg.levels)
                dead += d
            loss = loss + frame_loss / len(batch_idx)

        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite loss at iteration {it}")
        loss.backward()
        optimizer.step()
        logbook.entries.append({"iter": it, "loss": float(loss.item()), "lr": lr})
        logbook.dead_features += dead

    logbook.wall_seconds = time.monotonic() - start
    model.eval()
    ckpt = Checkpoint.from_model(model, meta={
        "stage": cfg.stage, "iteration": cfg.iterations, "seed": cfg.seed})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"stage{cfg.stage}.ckpt"
        save_checkpoint(ckpt, path)
        logbook.checkpoint_path = str(path)
        logbook.save_jsonl(out / f"stage{cfg.stage}_log.jsonl")
    return ckpt, logbook
