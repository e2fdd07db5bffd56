"""MVOL container and landmark annotation files.

An MVOL study is two files: ``<path>`` holds the JSON header

    {"dims": [nx, ny, nz], "spacing_mm": [sx, sy, sz],
     "origin_mm": [ox, oy, oz], "frames": T,
     "dtype": "f32-le", "layout": "x-fastest"}

and ``<path>.raw`` holds ``T * nx * ny * nz`` little-endian float32
values, frame-major, x varying fastest within a frame.

Landmark annotations are JSON objects ``{"frame": t, "points":
{"LVA": [x, y, z], ...}}`` with world-mm coordinates; a file may hold a
single object or a list of them. Absent keys mean unannotated.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .volume import LandmarkSet, Series4D, Volume3

MVOL_DTYPE = "f32-le"
MVOL_LAYOUT = "x-fastest"


class MvolError(ValueError):
    """Base class for MVOL load failures."""


class MvolHeaderError(MvolError):
    """Header missing, unparseable, or declaring invalid geometry."""


class MvolSizeError(MvolError):
    """Payload length disagrees with the declared dims and frame count."""


class MvolDataError(MvolError):
    """Payload contains non-finite values."""


def _payload_path(path) -> Path:
    return Path(str(path) + ".raw")


def write_mvol(series: Series4D, path) -> None:
    """Write a series as an MVOL header plus raw payload (atomic)."""
    path = Path(path)
    header = {
        "dims": list(series.dims),
        "spacing_mm": list(series.spacing),
        "origin_mm": list(series.origin),
        "frames": series.frame_count,
        "dtype": MVOL_DTYPE,
        "layout": MVOL_LAYOUT,
    }
    payload = np.concatenate(
        [f.data.ravel(order="F").astype("<f4") for f in series.frames]
    )
    _atomic_write_bytes(_payload_path(path), payload.tobytes())
    _atomic_write_text(path, json.dumps(header, indent=1, sort_keys=True))


def read_mvol(path) -> Series4D:
    """Read an MVOL study, validating header and payload consistency."""
    path = Path(path)
    try:
        header = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise MvolHeaderError(f"cannot read MVOL header {path}: {e}") from e
    for key in ("dims", "spacing_mm", "origin_mm", "frames", "dtype", "layout"):
        if key not in header:
            raise MvolHeaderError(f"MVOL header missing key {key!r}")
    if header["dtype"] != MVOL_DTYPE or header["layout"] != MVOL_LAYOUT:
        raise MvolHeaderError(
            f"unsupported dtype/layout {header['dtype']!r}/{header['layout']!r}"
        )
    dims = header["dims"]
    if len(dims) != 3 or any(int(d) < 1 for d in dims):
        raise MvolHeaderError(f"invalid dims {dims}")
    if any(float(s) <= 0 for s in header["spacing_mm"]):
        raise MvolHeaderError(f"invalid spacing {header['spacing_mm']}")
    frames = int(header["frames"])
    if frames < 1:
        raise MvolHeaderError(f"invalid frame count {frames}")

    dims = tuple(int(d) for d in dims)
    per_frame = int(np.prod(dims))
    raw = _payload_path(path)
    try:
        payload = np.fromfile(raw, dtype="<f4")
    except OSError as e:
        raise MvolHeaderError(f"cannot read MVOL payload {raw}: {e}") from e
    if payload.size != frames * per_frame:
        raise MvolSizeError(
            f"payload holds {payload.size} values, header declares "
            f"{frames} x {per_frame}"
        )
    if not np.isfinite(payload).all():
        raise MvolDataError("payload contains non-finite values")

    spacing = tuple(float(s) for s in header["spacing_mm"])
    origin = tuple(float(o) for o in header["origin_mm"])
    vols = [
        Volume3(dims, spacing, origin,
                payload[t * per_frame:(t + 1) * per_frame].reshape(dims, order="F"))
        for t in range(frames)
    ]
    return Series4D(vols)


def write_landmarks(annotations: dict[int, LandmarkSet], path) -> None:
    """Write per-frame annotations as a JSON list sorted by frame."""
    rows = [
        {"frame": int(t), "points": annotations[t].to_json_points()}
        for t in sorted(annotations)
    ]
    _atomic_write_text(Path(path), json.dumps(rows, indent=1, sort_keys=True))


def read_landmarks(path) -> dict[int, LandmarkSet]:
    obj = json.loads(Path(path).read_text())
    rows = obj if isinstance(obj, list) else [obj]
    out: dict[int, LandmarkSet] = {}
    for row in rows:
        out[int(row["frame"])] = LandmarkSet.from_json_points(row.get("points", {}))
    return out


def _atomic_write_bytes(path: Path, blob: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
