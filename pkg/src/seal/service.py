"""HTTP inference service backing the interactive UI.

GET /api/frames lists the pre-voxelized frame store (with base64 previews);
POST /api/infer runs prompts + text queries through the full model. The
session (checkpoint, frame store, text encoder) is immutable; a lock
serializes model forwards so concurrent identical requests are re-entrant
and byte-identical.
"""

from __future__ import annotations

import base64
import io
import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Union

import numpy as np
import torch
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from PIL import Image
from pydantic import BaseModel, Field

from seal import events as ev
from seal import rle
from seal.checkpoint import load_checkpoint
from seal.model import EventSegmenter, Prompt, PromptError, classify
from seal.synthetic import SynthTextEncoder


class ServiceError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status
        self.message = message


class PointPromptBody(BaseModel):
    kind: Literal["point"]
    x: int
    y: int


class BoxPromptBody(BaseModel):
    kind: Literal["box"]
    x_min: int
    y_min: int
    x_max: int
    y_max: int


class InferRequestBody(BaseModel):
    frame_id: str
    prompts: list[Union[PointPromptBody, BoxPromptBody]] = Field(min_length=1)
    queries: list[str] = Field(min_length=1)
    granularity: Literal["auto", "coarse", "fine"] = "auto"
    canonical: bool = False


def _render_preview(grid: np.ndarray) -> str:
    """Polarity-colored PNG of a voxel grid, base64-encoded."""
    flat = grid.sum(axis=0)
    peak = np.max(np.abs(flat)) or 1.0
    norm = flat / peak
    img = np.full(flat.shape + (3,), 24, dtype=np.uint8)
    pos = np.clip(norm, 0, 1)
    neg = np.clip(-norm, 0, 1)
    img[..., 0] = (24 + 220 * pos).astype(np.uint8)
    img[..., 2] = (24 + 220 * neg).astype(np.uint8)
    img[..., 1] = (24 + 60 * (pos + neg)).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


@dataclass
class Session:
    """Immutable inference session: one checkpoint, one frame store."""

    model: EventSegmenter
    frames: dict[str, ev.VoxelGrid]
    text_encoder: SynthTextEncoder

    @staticmethod
    def load(checkpoint_path, frame_dir, encoder_cfg: dict | None = None) -> "Session":
        model = load_checkpoint(checkpoint_path).to_model()
        frame_dir = Path(frame_dir)
        frames = {}
        for path in sorted(frame_dir.glob("*.vox")):
            frames[path.stem] = ev.load_voxel(path)
        if encoder_cfg is None:
            store_meta = frame_dir / "store.json"
            if store_meta.exists():
                encoder_cfg = json.loads(store_meta.read_text()).get("text_encoder")
        if encoder_cfg is None:
            encoder_cfg = {"classes": [], "dim": model.config.d, "seed": 0}
        return Session(model, frames, SynthTextEncoder.from_config(encoder_cfg))

    @staticmethod
    def from_manifest(checkpoint_path, manifest_path) -> "Session":
        """Voxelize a training manifest's frames into an in-memory store."""
        from seal.training import TrainManifest

        model = load_checkpoint(checkpoint_path).to_model()
        manifest = TrainManifest.load(manifest_path)
        cfg = ev.VoxelConfig(bins=manifest.voxel_bins, window_us=manifest.window_us,
                             height=model.config.input_size,
                             width=model.config.input_size)
        frames = {}
        for fr in manifest.frames:
            stream = ev.load_events(fr.events_path)
            frames[fr.frame_id] = ev.voxelize(stream, cfg)
        return Session(model, frames, manifest.text_encoder())


def handle_infer(session: Session, req: InferRequestBody) -> dict:
    """Stateless prompt inference; referentially transparent per session."""
    grid = session.frames.get(req.frame_id)
    if grid is None:
        raise ServiceError(404, f"unknown frame {req.frame_id!r}")
    model = session.model
    cfg = model.config
    queries = []
    for q in req.queries:
        vec = session.text_encoder(q)
        if not np.linalg.norm(vec):
            raise ServiceError(400, f"query {q!r} encodes to a zero vector")
        queries.append((q, vec))

    prompts = []
    for p in req.prompts:
        if p.kind == "point":
            prompts.append(Prompt.point(p.x, p.y))
        else:
            prompts.append(Prompt.from_box(p.x_min, p.y_min, p.x_max, p.y_max))

    voxel = ev.normalize_voxel(grid)
    if voxel.data.shape != (cfg.bins, cfg.input_size, cfg.input_size):
        raise ServiceError(400, "frame geometry does not match the model input size")
    text_tokens = torch.as_tensor(np.stack([v for _, v in queries]), dtype=model.dtype)

    results = []
    with torch.no_grad():
        feat_raw = model.encode_backbone(voxel.data)
        fused = model.enhance(feat_raw, text_tokens)
        for prompt in prompts:
            try:
                prompt.validate(cfg.input_size, cfg.input_size)
            except PromptError as e:
                raise ServiceError(400, str(e)) from e
            preds = model.decode_masks(feat_raw, [prompt])
            if prompt.kind == "point" and req.granularity != "auto":
                preds = [p for p in preds if p.granularity == req.granularity]
            entries = []
            for pred in preds:
                bundle = model.mask_feature_bundle(fused, feat_raw, pred.mask, pred.token)
                ranked = classify(bundle.enhanced.numpy(), queries,
                                  canonical=req.canonical,
                                  text_encoder=session.text_encoder)
                label, score = ranked[0]
                entries.append({
                    "mask": rle.encode(pred.mask),
                    "granularity": pred.granularity,
                    "label": label,
                    "score": score,
                })
            results.append(entries)
    return {
        "frame_id": req.frame_id,
        "width": cfg.input_size,
        "height": cfg.input_size,
        "results": results,
    }


def create_app(session: Session, static_dir=None) -> FastAPI:
    app = FastAPI(title="event segmentation service")
    lock = threading.Lock()

    @app.exception_handler(ServiceError)
    async def _service_error(_req: Request, exc: ServiceError):
        return JSONResponse(status_code=exc.status,
                            content={"code": exc.status, "message": exc.message})

    @app.exception_handler(RequestValidationError)
    async def _validation_error(_req: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400,
                            content={"code": 400, "message": str(exc.errors()[:1])})

    @app.get("/api/frames")
    def list_frames():
        out = []
        for fid, grid in session.frames.items():
            out.append({
                "frame_id": fid,
                "width": grid.config.width,
                "height": grid.config.height,
                "preview": _render_preview(grid.data),
            })
        return out

    @app.post("/api/infer")
    def infer(body: InferRequestBody):
        with lock:
            return handle_infer(session, body)

    if static_dir is not None and Path(static_dir).exists():
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")
    return app
