"""JSON checkpoints: named parameter arrays with shapes, config and extras.

Floats are written with ``repr`` precision so a load reproduces every value
bit for bit.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .numerics import ParamStore

FORMAT = "deconfts-checkpoint"
VERSION = 1


def save(path, *, kind: str, arch: str, config: dict, params: ParamStore, extra: dict | None = None) -> None:
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "arch": arch,
        "config": config,
        "extra": extra or {},
        "params": {
            name: {"shape": list(v.shape), "data": v.ravel().tolist()} for name, v in params.values.items()
        },
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def load(path, *, kind: str, arch: str | None = None) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: truncated or malformed checkpoint ({exc.msg})") from None
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {doc.get('version')!r}, expected {VERSION}")
    if doc.get("kind") != kind:
        raise CheckpointError(f"{path}: checkpoint holds a {doc.get('kind')!r}, expected {kind!r}")
    if arch is not None and doc.get("arch") != arch:
        raise CheckpointError(f"{path}: architecture mismatch, file has {doc.get('arch')!r}, expected {arch!r}")
    for key in ("config", "params", "extra"):
        if not isinstance(doc.get(key), dict):
            raise CheckpointError(f"{path}: missing {key!r} section")
    return doc


def restore_params(params: ParamStore, doc: dict, path) -> None:
    """Copy arrays from ``doc`` into ``params``; validates every entry before writing any."""
    stored = doc["params"]
    if set(stored) != set(params.names()):
        raise CheckpointError(f"{path}: parameter names {sorted(stored)} do not match model {sorted(params.names())}")
    arrays = {}
    for name, entry in stored.items():
        try:
            arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{path}: bad array for {name!r} ({exc})") from None
        if arr.shape != params[name].shape:
            raise CheckpointError(f"{path}: {name!r} has shape {arr.shape}, model expects {params[name].shape}")
        arrays[name] = arr
    for name, arr in arrays.items():
        params.set(name, arr)
