"""Checkpoint directories: ``manifest.json`` plus one PMXT file per named array."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from premixer import pmxt
from premixer.errors import CheckpointError, FormatError

MANIFEST = "manifest.json"
FORMAT_VERSION = 1


def save(directory, manifest: dict, arrays: dict) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, arr in arrays.items():
        fname = f"{name}.pmxt"
        pmxt.write(d / fname, arr)
        entries[name] = {"file": fname, "shape": list(np.shape(arr))}
    body = dict(manifest)
    body["format_version"] = FORMAT_VERSION
    body["arrays"] = entries
    (d / MANIFEST).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return d


def load(directory) -> tuple[dict, dict]:
    d = Path(directory)
    mpath = d / MANIFEST
    if not mpath.exists():
        raise CheckpointError(f"no checkpoint manifest at {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable manifest {mpath}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('format_version')}")
    arrays = {}
    for name, entry in manifest.get("arrays", {}).items():
        try:
            arr = pmxt.read(d / entry["file"])
        except (OSError, FormatError) as exc:
            raise CheckpointError(f"cannot read array {name!r}: {exc}") from exc
        if list(arr.shape) != entry["shape"]:
            raise CheckpointError(f"array {name!r} shape {arr.shape} != manifest {entry['shape']}")
        arrays[name] = arr.astype(np.float64)
    return manifest, arrays


def round_f32(arr) -> np.ndarray:
    """What a value looks like after a save/load cycle."""
    return np.asarray(arr, dtype=np.float32).astype(np.float64)
