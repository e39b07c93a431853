"""Synthetic dataset builder: writes event files, frame images, guidance
directories, a training manifest, and a held-out benchmark manifest.

This is the desk-scale stand-in for the real event/image corpora; the
on-disk layouts are exactly the ones training, evaluation, and serving
consume, so nothing downstream knows the data is synthetic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from seal import events as ev
from seal.benchmark import BenchmarkFrame, BenchmarkManifest, assign_labels
from seal.guidance import HierarchyLevel, build_guidance, save_guidance
from seal.synthetic import (
    BACKGROUND,
    SynthScene,
    SynthSceneConfig,
    make_aligned_scene,
    make_conflict_scene,
    scene_events,
)


@dataclass
class BuiltDataset:
    root: Path
    train_manifest: Path
    benchmark_manifest: Path


def _write_frame(root: Path, scene: SynthScene, stream, frame_id: str) -> dict:
    ev.save_events(stream, root / "events" / f"{frame_id}.evt")
    Image.fromarray(scene.image).save(root / "images" / f"{frame_id}.png")
    guidance = build_guidance(scene.image, scene.mask_sets, scene.providers)
    gdir = root / "guidance" / frame_id
    save_guidance(guidance, gdir)
    # Stage-1 teacher: the provider's pixel-feature map, stored verbatim.
    tmap = scene.providers.pixel_feature(scene.image).astype("<f4")
    tmap.tofile(gdir / "teacher.bin")
    (gdir / "teacher.json").write_text(json.dumps({"shape": list(tmap.shape)}))
    return {"frame_id": frame_id, "events": f"events/{frame_id}.evt",
            "image": f"images/{frame_id}.png", "guidance": f"guidance/{frame_id}"}


def build_synth_dataset(root, n_train: int = 64, n_eval: int = 8,
                        cfg: SynthSceneConfig | None = None, seed: int = 0,
                        window_us: int = 25_000) -> BuiltDataset:
    """Deterministic synthetic corpus: n_train training frames plus n_eval
    held-out frames that only appear in the benchmark manifest."""
    cfg = cfg or SynthSceneConfig()
    root = Path(root)
    for sub in ("events", "images", "guidance"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    make_scene = make_conflict_scene if cfg.conflict else make_aligned_scene
    train_frames, bench_frames = [], []
    encoder_cfg = None
    for i in range(n_train + n_eval):
        frame_id = f"{i:04d}"
        scene = make_scene(seed * 100_003 + i, cfg, frame_id)
        stream = scene_events(scene, seed * 100_003 + i + 7, window_us=window_us)
        entry = _write_frame(root, scene, stream, frame_id)
        if encoder_cfg is None:
            encoder_cfg = scene.text_encoder.config()
        if i < n_train:
            train_frames.append(entry)
        else:
            anns = assign_labels(
                scene.mask_sets[HierarchyLevel.INSTANCE], scene.semantic_map,
                scene.class_table, min_overlap=0.5, excluded=[BACKGROUND])
            bench_frames.append(BenchmarkFrame(frame_id, entry["events"], anns))

    train_doc = {
        "name": "synthetic", "width": cfg.width, "height": cfg.height,
        "voxel": {"bins": 3, "window_us": window_us},
        "dim": cfg.dim, "text_encoder": encoder_cfg, "frames": train_frames,
    }
    train_path = root / "manifest.json"
    train_path.write_text(json.dumps(train_doc))

    bench = BenchmarkManifest(
        name="synthetic-eval", classes=list(dict.fromkeys(
            cfg.class_names + [BACKGROUND])),
        excluded=[BACKGROUND], width=cfg.width, height=cfg.height,
        frames=bench_frames, voxel={"bins": 3, "window_us": window_us},
        text_encoder_cfg=encoder_cfg)
    bench_path = root / "benchmark.json"
    bench.save(bench_path)
    return BuiltDataset(root, train_path, bench_path)
