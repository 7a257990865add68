"""Checkpoint archive format: parameters + full config + format version.

A checkpoint is a single ``torch.save`` archive holding every parameter
array under stable hierarchical names, the full model config as a plain
dict, and a format-version integer. Loading rebuilds the model from the
stored config and rejects version or structural mismatches instead of
silently producing a half-loaded network.
"""

from __future__ import annotations

import hashlib
import os
import tempfile
from pathlib import Path

import torch

from .errors import CheckpointError
from .nets import ModelConfig, WatermarkModel

FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, model: WatermarkModel, extra: dict | None = None) -> None:
    """Atomically write a checkpoint (temp file + rename)."""
    path = Path(path)
    payload = {
        "format_version": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "model": model.state_dict(),
    }
    if extra:
        overlap = set(extra) & set(payload)
        if overlap:
            raise CheckpointError(f"extra keys collide with reserved keys: {sorted(overlap)}")
        payload.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            torch.save(payload, f)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def load_payload(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a semimark checkpoint")
    if payload["format_version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {payload['format_version']} unsupported "
            f"(this build reads version {FORMAT_VERSION})"
        )
    return payload


def load_checkpoint(path: str | Path) -> tuple[WatermarkModel, dict]:
    """Rebuild the model from a checkpoint; returns (model, full payload)."""
    payload = load_payload(path)
    try:
        cfg = ModelConfig.from_dict(payload["config"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed config record ({exc})") from exc
    model = WatermarkModel(cfg)
    try:
        model.load_state_dict(payload["model"], strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not match the stored config ({exc})") from exc
    model.eval()
    return model, payload


def checkpoint_hash(path: str | Path) -> str:
    """sha256 of the checkpoint file, for provenance in reports."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
