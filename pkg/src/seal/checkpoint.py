"""Checkpoint container: a zip of named little-endian float32 arrays plus a
JSON config document (model config + training metadata)."""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np
import torch

from seal.model import EventSegmenter, ModelConfig


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    config: ModelConfig
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, arr in self.arrays.items():
            if not np.all(np.isfinite(arr)):
                raise CheckpointError(f"parameter {name} contains non-finite values")

    @staticmethod
    def from_model(model: EventSegmenter, meta: dict | None = None) -> "Checkpoint":
        arrays = {name: p.detach().cpu().numpy().astype(np.float32)
                  for name, p in model.state_dict().items()}
        return Checkpoint(arrays, model.config, dict(meta or {}))

    def to_model(self) -> EventSegmenter:
        model = EventSegmenter(self.config)
        state = {name: torch.from_numpy(arr.copy()) for name, arr in self.arrays.items()}
        model.load_state_dict(state)
        model.eval()
        return model


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    doc = {
        "config": ckpt.config.to_dict(),
        "meta": ckpt.meta,
        "params": {name: list(arr.shape) for name, arr in ckpt.arrays.items()},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("config.json", json.dumps(doc, indent=1))
        for name, arr in ckpt.arrays.items():
            zf.writestr(f"params/{name}.bin", arr.astype("<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    try:
        with zipfile.ZipFile(path, "r") as zf:
            doc = json.loads(zf.read("config.json"))
            arrays = {}
            for name, shape in doc["params"].items():
                raw = zf.read(f"params/{name}.bin")
                arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: not a valid checkpoint: {e}") from e
    return Checkpoint(arrays, ModelConfig.from_dict(doc["config"]), doc.get("meta", {}))
