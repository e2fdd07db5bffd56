"""Checkpoint container: JSON manifest plus raw float32 payload.

``<path>`` holds the manifest (config echo, tensor directory, Adam step
counts); ``<path>.bin`` holds the tensors back to back as little-endian
float32. Each parameter stores value, first moment, and second moment,
so a reloaded model resumes training bit-exactly.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .optim import Param

_FIELDS = ("value", "m", "v")


def save_checkpoint(path, config: dict, named_params) -> None:
    """Write params (iterable of (name, Param)) with their optimizer state."""
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for name, p in named_params:
        for field in _FIELDS:
            arr = np.ascontiguousarray(getattr(p, field), dtype="<f4")
            entries.append({
                "name": name,
                "field": field,
                "shape": list(arr.shape),
                "offset": offset,
            })
            blobs.append(arr.tobytes())
            offset += arr.nbytes
        entries[-3]["step"] = p.t
    manifest = {
        "format": "cardioviews-ckpt-v1",
        "config": config,
        "tensors": entries,
    }
    tmp = path.with_name(path.name + ".bin.tmp")
    tmp.write_bytes(b"".join(blobs))
    os.replace(tmp, path.with_name(path.name + ".bin"))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (config, {name: Param}) with optimizer state restored."""
    path = Path(path)
    manifest = json.loads(path.read_text())
    if manifest.get("format") != "cardioviews-ckpt-v1":
        raise ValueError(f"not a cardioviews checkpoint: {path}")
    blob = path.with_name(path.name + ".bin").read_bytes()
    params: dict[str, Param] = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(
            blob, dtype="<f4", count=count, offset=entry["offset"]
        ).reshape(shape).astype(np.float32)
        name = entry["name"]
        if name not in params:
            params[name] = Param(name, np.zeros(shape, dtype=np.float32))
        p = params[name]
        if entry["field"] == "value":
            p.value = arr.copy()
            p.t = int(entry.get("step", 0))
        else:
            setattr(p, entry["field"], arr.copy())
    return manifest["config"], params
