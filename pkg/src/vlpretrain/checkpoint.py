"""Checkpoint archive: encoder and objective tensors plus a metadata block.

The archive is a ``torch.save`` dict; the metadata is also written as a
sidecar JSON next to it (``<name>.json``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch

from .datamodel import ClassCatalog
from .encoders import EncoderConfig, TextEncoder, VisionEncoder, build_toy_encoders
from .objectives import ObjectiveState


@dataclass
class Checkpoint:
    vision: VisionEncoder
    text: Optional[TextEncoder]
    state: ObjectiveState
    meta: dict

    @property
    def kind(self) -> str:
        return self.state.kind

    @property
    def catalog(self) -> ClassCatalog:
        c = self.meta["catalog"]
        return ClassCatalog.from_names(c["names"], c.get("novel", ()))

    @property
    def class_names(self) -> list[str]:
        return list(self.meta["catalog"]["names"])

    def eval(self) -> "Checkpoint":
        self.vision.eval()
        if self.text is not None:
            self.text.eval()
        return self


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_checkpoint(path, vision: VisionEncoder, text: Optional[TextEncoder],
                    state: ObjectiveState, meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    archive = {
        "vision": vision.state_dict(),
        "text": text.state_dict() if text is not None else None,
        "objective": state.state_dict(),
        "meta": json.dumps(meta, sort_keys=True),
    }
    torch.save(archive, path)
    sidecar_path(path).write_text(json.dumps(meta, indent=1, sort_keys=True))
    return path


def load_checkpoint(path, device: str = "cpu") -> Checkpoint:
    archive = torch.load(Path(path), map_location=device, weights_only=True)
    meta = json.loads(archive["meta"])
    enc_cfg = EncoderConfig.from_dict(meta["encoder"])
    vision, text = build_toy_encoders(enc_cfg, seed=0, with_text=archive["text"] is not None)
    dtype = torch.float64 if meta.get("precision") == "float64" else torch.float32
    vision.load_state_dict(archive["vision"])
    vision.to(device=device, dtype=dtype)
    if text is not None:
        text.load_state_dict(archive["text"])
        text.to(device=device, dtype=dtype)
    state = ObjectiveState(meta["objective"], n_classes=len(meta["catalog"]["names"]),
                           proj_dim=enc_cfg.proj_dim, lam=meta.get("lambda", 0.1))
    state.load_state_dict(archive["objective"])
    state.to(device=device, dtype=dtype)
    return Checkpoint(vision, text, state, meta).eval()
