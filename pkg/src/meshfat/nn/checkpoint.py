"""Checkpoints: a JSON header next to a little-endian float64 payload.

The payload holds every parameter and then every buffer, in the model's
declared order, each flattened in C order.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .layers import Module
from .models import build_model

FORMAT = "meshfat-checkpoint/1"


def _arrays(model: Module) -> list[np.ndarray]:
    return [p.value for p in model.parameters()] + list(model.buffers())


def save_checkpoint(path, model: Module, extra: dict | None = None) -> Path:
    """Write ``<path>.json`` and ``<path>.bin``; returns the JSON path."""
    stem = Path(path).with_suffix("")
    stem.parent.mkdir(parents=True, exist_ok=True)
    arrays = _arrays(model)
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    meta = {
        "format": FORMAT,
        "kind": model.kind,
        "config": model.config,
        "parameters": [{"name": p.name, "shape": list(p.value.shape)} for p in model.parameters()],
        "buffers": [list(b.shape) for b in model.buffers()],
        "sha256": hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }
    stem.with_suffix(".bin").write_bytes(payload)
    out = stem.with_suffix(".json")
    out.write_text(json.dumps(meta, indent=1, sort_keys=True))
    return out


def load_checkpoint(path) -> tuple[Module, dict]:
    stem = Path(path).with_suffix("")
    meta = json.loads(stem.with_suffix(".json").read_text())
    if meta.get("format") != FORMAT:
        raise ValueError(f"{stem}.json: unsupported checkpoint format {meta.get('format')!r}")
    payload = stem.with_suffix(".bin").read_bytes()
    if hashlib.sha256(payload).hexdigest() != meta["sha256"]:
        raise ValueError(f"{stem}.bin: payload hash mismatch")
    model = build_model(meta["kind"], meta["config"])
    flat = np.frombuffer(payload, dtype="<f8")
    arrays = _arrays(model)
    if sum(a.size for a in arrays) != flat.size:
        raise ValueError(f"{stem}.bin: payload size does not match the architecture")
    pos = 0
    for a in arrays:
        a[...] = flat[pos:pos + a.size].reshape(a.shape)
        pos += a.size
    return model, meta.get("extra", {})
