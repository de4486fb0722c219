"""Checkpoint files: one JSON document per model.

Layout::

    {"format": "slfc-ckpt-v1", "kind": "slfc" | "bc" | "mdn",
     "config": {...}, "params": {name: {"shape": [...], "data": [...]}},
     "train_state": {...}}              # optional, for exact resume

Floats are written with Python's shortest round-trip repr, so a
save/load cycle is bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigError

FORMAT = "slfc-ckpt-v1"


def encode_arrays(arrays: Mapping[str, np.ndarray]) -> dict:
    return {
        k: {"shape": list(np.shape(v)), "data": np.asarray(v, dtype=np.float64).ravel().tolist()}
        for k, v in sorted(arrays.items())
    }


def decode_arrays(d: Mapping) -> dict[str, np.ndarray]:
    try:
        return {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d.items()}
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"malformed parameter block: {exc}") from exc


def save_checkpoint(path, kind: str, config: Mapping, arrays: Mapping, train_state: Mapping | None = None) -> None:
    doc = {"format": FORMAT, "kind": kind, "config": dict(config), "params": encode_arrays(arrays)}
    if train_state is not None:
        doc["train_state"] = train_state
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8")


def load_checkpoint(path, kind: str | None = None) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not a JSON checkpoint ({exc})") from exc
    if doc.get("format") != FORMAT:
        raise ConfigError(f"{path}: unsupported checkpoint format {doc.get('format')!r}")
    if kind is not None and doc.get("kind") != kind:
        raise ConfigError(f"{path}: checkpoint holds a {doc.get('kind')!r} model, expected {kind!r}")
    doc["params"] = decode_arrays(doc["params"])
    return doc


def save_model(path, params, train_state: Mapping | None = None) -> None:
    """Write a :class:`~slfc.model.ModelParams` checkpoint."""
    save_checkpoint(path, "slfc", params.config.to_dict(), params.arrays, train_state)


def load_model(path):
    """Read a model checkpoint; returns ``(ModelParams, train_state or None)``."""
    from .model import ModelConfig, ModelParams

    doc = load_checkpoint(path, "slfc")
    return ModelParams(ModelConfig.from_dict(doc["config"]), doc["params"]), doc.get("train_state")
