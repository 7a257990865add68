"""Layered run configuration: defaults < config file < environment < flags.

The fully resolved mapping is echoed into every structured artifact
(reports, training logs, checkpoints' sidecars) so results stay
attributable to the exact settings that produced them.

Environment variables use the ``SEMIMARK_`` prefix with ``__`` as the
nesting separator, e.g. ``SEMIMARK_BENCH__SEED=7`` sets ``bench.seed``.
Values are parsed as YAML scalars, so numbers and booleans come through
typed.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Mapping

import yaml

from .distortions import CodecAdapter, register_codec
from .errors import ConfigurationError
from .training import TrainConfig

ENV_PREFIX = "SEMIMARK_"


def default_config() -> dict:
    return {
        "train": TrainConfig().to_dict(),
        "bench": {
            "fragile_threshold": 0.65,
            "robust_threshold": 0.90,
            "seed": 0,
            "format": "table",
            "clip_seconds": 2.0,
            "n_clips": 100,
        },
        "paths": {
            "corpus": None,
            "checkpoint": None,
            "out_dir": "runs",
        },
        "adapters": {
            "codecs": {},
        },
        "service": {
            "host": "127.0.0.1",
            "port": 8752,
        },
    }


def _deep_merge(base: dict, overlay: Mapping) -> dict:
    out = dict(base)
    for key, value in overlay.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config_file(path: str | Path) -> dict:
    """Parse a YAML or JSON config file into a plain mapping."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    text = path.read_text()
    try:
        doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigurationError(f"could not parse {path}: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path} must hold a mapping at the top level")
    return doc


def _env_overrides(env: Mapping[str, str]) -> dict:
    out: dict = {}
    for key, raw in env.items():
        if not key.startswith(ENV_PREFIX):
            continue
        trail = key[len(ENV_PREFIX):].lower().split("__")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError:
            value = raw
        node = out
        for part in trail[:-1]:
            node = node.setdefault(part, {})
        node[trail[-1]] = value
    return out


def resolve_config(config_file: str | Path | None = None,
                   env: Mapping[str, str] | None = None,
                   overrides: Mapping | None = None,
                   profile: str | None = None) -> dict:
    """Produce the effective configuration for one command invocation.

    Precedence, lowest to highest: built-in defaults (optionally swapped
    for a named profile), the config file, ``SEMIMARK_*`` environment
    variables, and explicit overrides from CLI flags.
    """
    cfg = default_config()
    if profile:
        if profile == "desk":
            cfg["train"] = TrainConfig.desk().to_dict()
        elif profile != "default":
            raise ConfigurationError(f"unknown profile {profile!r} (default, desk)")
    if config_file is not None:
        cfg = _deep_merge(cfg, load_config_file(config_file))
    cfg = _deep_merge(cfg, _env_overrides(env if env is not None else os.environ))
    if overrides:
        cfg = _deep_merge(cfg, overrides)
    return cfg


def train_config_from(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict(cfg["train"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid train configuration: {exc}") from exc


def register_adapters_from(cfg: dict) -> list[str]:
    """Install codec adapters declared under ``adapters.codecs``.

    Each entry maps a codec name to encode/decode argument templates (and
    an optional intermediate-file suffix). Returns the registered names.
    """
    registered = []
    codecs = (cfg.get("adapters") or {}).get("codecs") or {}
    for name, spec in codecs.items():
        try:
            adapter = CodecAdapter(
                codec=name,
                encode_args=tuple(spec["encode"]),
                decode_args=tuple(spec["decode"]),
                suffix=spec.get("suffix", f".{name}"),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(
                f"codec adapter {name!r} needs 'encode' and 'decode' argument lists"
            ) from exc
        register_codec(adapter)
        registered.append(name)
    return registered
