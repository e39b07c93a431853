"""Command-line front end for every pipeline stage.

Subcommands: voxelize, build-guidance, train, eval, infer, profile,
export-features, serve. Validation failures exit 2 with a one-line
diagnostic. The SEAL_CKPT environment variable overrides --ckpt wherever a
checkpoint is consumed.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import numpy as np


def _ckpt_path(flag_value):
    env = os.environ.get("SEAL_CKPT")
    path = env or flag_value
    if not path:
        raise click.UsageError("no checkpoint: pass --ckpt or set SEAL_CKPT")
    return path


@click.group()
def main():
    """Open-vocabulary event instance segmentation toolkit."""


@main.command()
@click.option("--events", "events_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--bins", default=3, show_default=True)
@click.option("--window-ms", default=25.0, show_default=True)
@click.option("--format", "fmt", default="binary", type=click.Choice(["binary", "csv"]))
@click.option("--width", type=int, default=None, help="CSV sensor width / output override")
@click.option("--height", type=int, default=None)
@click.option("--t-start", type=int, default=None, help="window start (us); default: first event")
@click.option("--normalize/--no-normalize", default=False, show_default=True)
def voxelize(events_path, out_path, bins, window_ms, fmt, width, height, t_start, normalize):
    """Convert one event window into a voxel grid file."""
    from seal import events as ev

    try:
        stream = ev.load_events(events_path, format=fmt, width=width, height=height)
    except (ev.EventFormatError, ev.EventValidationError, ValueError) as e:
        raise click.UsageError(str(e))
    window_us = int(window_ms * 1000)
    t0 = t_start if t_start is not None else (int(stream.ts[0]) if len(stream) else 0)
    sliced = ev.slice_window(stream, t0, window_us)
    cfg = ev.VoxelConfig(bins=bins, window_us=window_us,
                         height=height or stream.height, width=width or stream.width)
    grid = ev.voxelize(sliced, cfg, t0=t0)
    if normalize:
        grid = ev.normalize_voxel(grid)
    ev.save_voxel(grid, out_path)
    click.echo(f"wrote {out_path}: {bins}x{cfg.height}x{cfg.width}, "
               f"{len(sliced)} events in window")


@main.command("build-guidance")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--frames", default=64, show_default=True, help="training frames")
@click.option("--eval-frames", default=8, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--classes", default=3, show_default=True)
@click.option("--dim", default=16, show_default=True)
@click.option("--sigma", default=0.0, show_default=True)
@click.option("--conflict/--aligned", default=False, show_default=True,
              help="generate cell-sharing conflict scenes instead of aligned tiles")
def build_guidance(out_dir, frames, eval_frames, seed, classes, dim, sigma, conflict):
    """Generate a synthetic corpus with hierarchical guidance on disk."""
    from seal.dataset import build_synth_dataset
    from seal.synthetic import SynthConfigError, SynthSceneConfig

    try:
        cfg = SynthSceneConfig(n_classes=classes, dim=dim, sigma=sigma, conflict=conflict)
        built = build_synth_dataset(out_dir, n_train=frames, n_eval=eval_frames,
                                    cfg=cfg, seed=seed)
    except SynthConfigError as e:
        raise click.UsageError(str(e))
    click.echo(f"wrote {built.train_manifest} and {built.benchmark_manifest}")


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--stage", type=click.IntRange(1, 2), default=1, show_default=True)
@click.option("--iterations", default=300, show_default=True)
@click.option("--batch", default=8, show_default=True)
@click.option("--lr", default=2e-4, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--init", "init_ckpt", type=click.Path(exists=True), default=None,
              help="stage-1 checkpoint (required for --stage 2)")
@click.option("--out", "out_dir", default="runs", show_default=True)
@click.option("--levels", default="sip", show_default=True)
@click.option("--visual/--no-visual", default=True, show_default=True)
@click.option("--text/--no-text", default=True, show_default=True)
@click.option("--fusion/--no-fusion", default=True, show_default=True)
@click.option("--se/--no-se", default=True, show_default=True)
@click.option("--mfe/--no-mfe", default=True, show_default=True)
@click.option("--model-size", type=click.Choice(["small", "paper"]), default="small",
              show_default=True)
def train(manifest, stage, iterations, batch, lr, seed, init_ckpt, out_dir, levels,
          visual, text, fusion, se, mfe, model_size):
    """Run one training stage (1: backbone/decoder, 2: fusion/SE/MFE)."""
    from seal.model import ModelConfig
    from seal.training import TrainConfig
    from seal.training import train as run_train

    if stage == 2 and init_ckpt is None:
        raise click.UsageError("--stage 2 needs the stage-1 checkpoint via --init")
    toggles = dict(use_fusion=fusion, use_se=se, use_mfe=mfe)
    model_config = (ModelConfig.small(**toggles) if model_size == "small"
                    else ModelConfig(**toggles))
    cfg = TrainConfig(iterations=iterations, batch_size=batch, lr=lr, seed=seed,
                      stage=stage, use_visual=visual, use_text=text,
                      levels=tuple(levels))
    ckpt, log = run_train(manifest, cfg, model_config=model_config,
                          init_checkpoint=init_ckpt, out_dir=out_dir)
    losses = log.losses()
    click.echo(f"stage {stage}: {len(losses)} iterations, "
               f"loss {losses[0]:.4f} -> {losses[-1]:.4f}, "
               f"checkpoint {log.checkpoint_path}")


@main.command("eval")
@click.option("--ckpt", default=None, type=click.Path())
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--prompt", type=click.Choice(["box", "point"]), default="box",
              show_default=True)
@click.option("--out", "out_path", default=None, type=click.Path())
def eval_cmd(ckpt, manifest, prompt, out_path):
    """Evaluate a checkpoint on a benchmark manifest; prints the AP table."""
    from seal.benchmark import BenchmarkManifest, evaluate_ap, predict_benchmark
    from seal.checkpoint import load_checkpoint
    from seal.synthetic import SynthTextEncoder

    model = load_checkpoint(_ckpt_path(ckpt)).to_model()
    bench = BenchmarkManifest.load(manifest)
    if bench.text_encoder_cfg is None:
        raise click.UsageError("benchmark manifest carries no text encoder config")
    encoder = SynthTextEncoder.from_config(bench.text_encoder_cfg)
    preds = predict_benchmark(model, bench, encoder, prompt_kind=prompt,
                              root=Path(manifest).parent)
    report = evaluate_ap(preds, bench, prompt_kind=prompt)
    click.echo(f"{'class':<16}{'AP':>8}")
    for cls, ap in sorted(report.per_class.items()):
        click.echo(f"{cls:<16}{ap:>8.3f}")
    click.echo(f"{'AP':<16}{report.ap:>8.3f}")
    click.echo(f"{'AP50':<16}{report.ap50:>8.3f}")
    click.echo(f"{'AP25':<16}{report.ap25:>8.3f}")
    if out_path:
        Path(out_path).write_text(json.dumps(report.to_dict(), indent=1))
        click.echo(f"report written to {out_path}")


@main.command()
@click.option("--ckpt", default=None, type=click.Path())
@click.option("--manifest", required=True, type=click.Path(exists=True),
              help="training manifest used as the frame store")
@click.option("--frame-id", required=True)
@click.option("--point", "points", multiple=True, help="x,y (repeatable)")
@click.option("--box", "boxes", multiple=True, help="x0,y0,x1,y1 (repeatable)")
@click.option("--query", "queries", multiple=True, required=True)
@click.option("--granularity", type=click.Choice(["auto", "coarse", "fine"]),
              default="auto", show_default=True)
@click.option("--canonical/--no-canonical", default=False, show_default=True)
def infer(ckpt, manifest, frame_id, points, boxes, queries, granularity, canonical):
    """One-shot prompt inference; prints the response JSON."""
    from seal.service import InferRequestBody, ServiceError, Session, handle_infer

    prompts = []
    try:
        for p in points:
            x, y = (int(v) for v in p.split(","))
            prompts.append({"kind": "point", "x": x, "y": y})
        for b in boxes:
            x0, y0, x1, y1 = (int(v) for v in b.split(","))
            prompts.append({"kind": "box", "x_min": x0, "y_min": y0,
                            "x_max": x1, "y_max": y1})
    except ValueError:
        raise click.UsageError("prompts must be integer tuples: --point x,y / --box x0,y0,x1,y1")
    if not prompts:
        raise click.UsageError("at least one --point or --box required")
    session = Session.from_manifest(_ckpt_path(ckpt), manifest)
    req = InferRequestBody(frame_id=frame_id, prompts=prompts, queries=list(queries),
                           granularity=granularity, canonical=canonical)
    try:
        resp = handle_infer(session, req)
    except ServiceError as e:
        click.echo(f"error {e.status}: {e.message}", err=True)
        sys.exit(1)
    click.echo(json.dumps(resp))


@main.command()
@click.option("--resolutions", default="32,512", show_default=True)
@click.option("--masks", default="10,100,1000", show_default=True)
@click.option("--channels", default=16, show_default=True)
@click.option("--repeats", default=3, show_default=True)
@click.option("--backend", type=click.Choice(["auto", "numpy", "cython"]), default="auto",
              show_default=True)
@click.option("--out", "out_path", default=None, type=click.Path())
def profile(resolutions, masks, channels, repeats, backend, out_path):
    """Time the RoI pooling kernel across feature resolutions and mask counts."""
    from seal.benchmark import profile_roi_align, write_profile_csv

    res = [int(v) for v in resolutions.split(",")]
    counts = [int(v) for v in masks.split(",")]
    rows = profile_roi_align(res, counts, channels=channels, repeats=repeats,
                             backend=None if backend == "auto" else backend)
    click.echo("resolution,masks,ms")
    for r in rows:
        click.echo(f"{r['resolution']},{r['masks']},{r['ms']:.4f}")
    if out_path:
        write_profile_csv(rows, out_path)


@main.command("export-features")
@click.option("--ckpt", default=None, type=click.Path())
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--prompt", type=click.Choice(["box", "point"]), default="box",
              show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def export_features(ckpt, manifest, prompt, out_path):
    """Dump enhanced mask features for external projection/analysis."""
    from seal.benchmark import BenchmarkManifest, export_mask_features
    from seal.checkpoint import load_checkpoint
    from seal.synthetic import SynthTextEncoder

    model = load_checkpoint(_ckpt_path(ckpt)).to_model()
    bench = BenchmarkManifest.load(manifest)
    encoder = SynthTextEncoder.from_config(bench.text_encoder_cfg)
    dump = export_mask_features(model, bench, encoder, prompt_kind=prompt,
                                root=Path(manifest).parent)
    dump.save(out_path)
    click.echo(f"wrote {len(dump.labels)} rows ({len(dump.dead_rows)} dead) to {out_path}")


@main.command()
@click.option("--ckpt", default=None, type=click.Path())
@click.option("--manifest", default=None, type=click.Path(exists=True),
              help="training manifest to voxelize as the frame store")
@click.option("--frames", "frame_dir", default=None, type=click.Path(exists=True),
              help="directory of .vox files (alternative to --manifest)")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
@click.option("--ui", "ui_dir", default=None, type=click.Path(),
              help="static directory with the browser UI build")
def serve(ckpt, manifest, frame_dir, host, port, ui_dir):
    """Run the interactive inference HTTP service."""
    import uvicorn

    from seal.service import Session, create_app

    path = _ckpt_path(ckpt)
    if manifest:
        session = Session.from_manifest(path, manifest)
    elif frame_dir:
        session = Session.load(path, frame_dir)
    else:
        raise click.UsageError("pass --manifest or --frames for the frame store")
    app = create_app(session, static_dir=ui_dir)
    click.echo(f"serving {len(session.frames)} frames on http://{host}:{port}")
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
