"""Cardiac view planes from the six landmarks, and their rendering.

Plane frame convention: a pixel (u, w) of the rendered image samples the
volume at ``origin + u * right + w * up``; rows run top to bottom along
decreasing ``up``-coordinate, columns left to right along increasing
``right``-coordinate. Orientation requirements ("apex on top", "apex on
the left", "right ventricle on the left") therefore become sign
constraints on landmark coordinates in this frame:

* four-chamber: plane through TV, MV, LVA; ``up`` points from the TV-MV
  midpoint toward the apex, so the apex renders on top.
* three-chamber: plane through AV, MV, LVA; ``-right`` points from the
  AV-MV midpoint toward the apex, so the apex renders on the left.
* two-chamber: bisects the obtuse dihedral angle between the three- and
  four-chamber planes (normals oriented to a non-negative dot product,
  bisector ``n3 - n4``), contains the MV-LVA line, apex on the left.
* short-axis stack: planes orthogonal to the LVA-to-MV axis, evenly
  spaced origins on that axis, right ventricle toward the image left.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volume import LandmarkId, LandmarkSet, Series4D, Volume3, trilinear_sample

_UNIT_TOL = 1e-9
MIN_TRIANGLE_AREA_MM2 = 1.0


class MissingLandmarkError(ValueError):
    def __init__(self, missing, view):
        self.missing = [m.value for m in missing]
        super().__init__(f"{view} view needs landmarks {', '.join(self.missing)}")


class GeometryError(ValueError):
    """Degenerate landmark configuration (collinear points, parallel planes)."""


@dataclass
class PlaneSpec:
    """Oriented sampling plane: orthonormal (right, up, normal) at an origin."""

    origin: np.ndarray
    normal: np.ndarray
    up: np.ndarray
    right: np.ndarray
    extent_mm: tuple[float, float] = (200.0, 200.0)
    resolution: tuple[int, int] = (256, 256)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        for name in ("normal", "up", "right"):
            vec = np.asarray(getattr(self, name), dtype=float).reshape(3)
            if abs(np.linalg.norm(vec) - 1.0) > _UNIT_TOL:
                raise ValueError(f"{name} must be a unit vector")
            setattr(self, name, vec)
        for a, b in (("normal", "up"), ("normal", "right"), ("up", "right")):
            if abs(np.dot(getattr(self, a), getattr(self, b))) > _UNIT_TOL:
                raise ValueError(f"{a} and {b} must be orthogonal")
        if np.abs(np.cross(self.normal, self.up) - self.right).max() > _UNIT_TOL:
            raise ValueError("right must equal normal x up")
        self.extent_mm = (float(self.extent_mm[0]), float(self.extent_mm[1]))
        if min(self.extent_mm) <= 0:
            raise ValueError("extent must be positive")
        self.resolution = (int(self.resolution[0]), int(self.resolution[1]))
        if min(self.resolution) < 2:
            raise ValueError("resolution must be at least 2 pixels per axis")

    def in_plane_coords(self, p) -> np.ndarray:
        """(right, up) coordinates of world points; normal offset dropped."""
        d = np.atleast_2d(np.asarray(p, dtype=float)) - self.origin
        return np.stack([d @ self.right, d @ self.up], axis=-1).squeeze()

    def to_json(self) -> dict:
        return {
            "origin_mm": self.origin.tolist(),
            "normal": self.normal.tolist(),
            "up": self.up.tolist(),
            "right": self.right.tolist(),
            "extent_mm": list(self.extent_mm),
            "resolution": list(self.resolution),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PlaneSpec":
        return cls(obj["origin_mm"], obj["normal"], obj["up"], obj["right"],
                   tuple(obj["extent_mm"]), tuple(obj["resolution"]))


@dataclass
class SaxParams:
    n_slices: int = 6
    span_lo: float = 0.0
    span_hi: float = 1.0

    def __post_init__(self):
        if self.n_slices < 1:
            raise ValueError("n_slices must be >= 1")
        if not self.span_lo < self.span_hi:
            raise ValueError("span_lo must be below span_hi")


def _require(lms: LandmarkSet, needed, view: str):
    missing = [lid for lid in needed if lid not in lms]
    if missing:
        raise MissingLandmarkError(missing, view)
    return [lms[lid] for lid in needed]


def _unit(v, what="vector"):
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise GeometryError(f"cannot normalize near-zero {what}")
    return v / n


def _reorthogonalize(v, n):
    return _unit(v - np.dot(v, n) * n)


def default_extent(lms: LandmarkSet, factor: float = 1.5) -> tuple[float, float]:
    """1.5x the bounding sphere (around the centroid) of the landmarks."""
    pts = np.stack([p for _, p in lms.items()])
    centroid = pts.mean(axis=0)
    diameter = 2.0 * float(np.linalg.norm(pts - centroid, axis=1).max())
    side = max(factor * diameter, 1.0)
    return (side, side)


def _triangle_plane(a, b, c, view: str):
    normal = np.cross(b - a, c - a)
    if 0.5 * np.linalg.norm(normal) < MIN_TRIANGLE_AREA_MM2:
        raise GeometryError(
            f"{view} landmarks are collinear (triangle area below "
            f"{MIN_TRIANGLE_AREA_MM2} mm^2)")
    return _unit(normal)


def plane_4ch(lms: LandmarkSet, extent_mm=None, resolution=(256, 256)) -> PlaneSpec:
    """Plane through TV, MV, LVA with the apex on top of the image."""
    tv, mv, lva = _require(lms, (LandmarkId.TV, LandmarkId.MV, LandmarkId.LVA), "4ch")
    normal = _triangle_plane(tv, mv, lva, "4ch")
    up = _reorthogonalize(lva - (tv + mv) / 2.0, normal)
    right = np.cross(normal, up)
    origin = (tv + mv + lva) / 3.0
    return PlaneSpec(origin, normal, up, right,
                     extent_mm or default_extent(lms), resolution)


def plane_3ch(lms: LandmarkSet, extent_mm=None, resolution=(256, 256)) -> PlaneSpec:
    """Plane through AV, MV, LVA with the apex on the left of the image."""
    av, mv, lva = _require(lms, (LandmarkId.AV, LandmarkId.MV, LandmarkId.LVA), "3ch")
    normal = _triangle_plane(av, mv, lva, "3ch")
    right = _reorthogonalize(-(lva - (av + mv) / 2.0), normal)
    up = np.cross(right, normal)
    origin = (av + mv + lva) / 3.0
    return PlaneSpec(origin, normal, up, right,
                     extent_mm or default_extent(lms), resolution)


def plane_2ch(p3: PlaneSpec, p4: PlaneSpec, lms: LandmarkSet,
              extent_mm=None, resolution=(256, 256)) -> PlaneSpec:
    """Bisector of the obtuse dihedral angle between the 3ch and 4ch planes.

    The result contains the MV-LVA line (shared by both input planes)
    with the apex on the left.
    """
    mv, lva = _require(lms, (LandmarkId.MV, LandmarkId.LVA), "2ch")
    n3 = p3.normal
    n4 = p4.normal if np.dot(p3.normal, p4.normal) >= 0 else -p4.normal
    if np.linalg.norm(np.cross(n3, n4)) < 1e-6:
        raise GeometryError("3ch and 4ch planes are parallel; 2ch bisector undefined")
    normal = _unit(n3 - n4)
    origin = (mv + lva) / 2.0
    right = _reorthogonalize(-(lva - origin), normal)
    up = np.cross(right, normal)
    return PlaneSpec(origin, normal, up, right,
                     extent_mm or default_extent(lms), resolution)


def sax_stack(lms: LandmarkSet, params: SaxParams | None = None,
              extent_mm=None, resolution=(256, 256)) -> list[PlaneSpec]:
    """Short-axis planes orthogonal to the LVA-to-MV axis, apex to base.

    Origins are spaced evenly between the span fractions along the axis;
    the right ventricle (RVA projection) points to the image left on
    every slice.
    """
    params = params or SaxParams()
    lva, mv = _require(lms, (LandmarkId.LVA, LandmarkId.MV), "SAX")
    if LandmarkId.RVA not in lms:
        raise MissingLandmarkError(
            [LandmarkId.RVA], "SAX (in-plane orientation requires the RV apex)")
    rva = lms[LandmarkId.RVA]
    axis = mv - lva
    if np.linalg.norm(axis) < 1e-9:
        raise GeometryError("LVA and MV coincide; SAX axis undefined")
    normal = _unit(axis)

    if params.n_slices == 1:
        fracs = [0.5 * (params.span_lo + params.span_hi)]
    else:
        fracs = np.linspace(params.span_lo, params.span_hi, params.n_slices)
    extent = extent_mm or default_extent(lms)
    planes = []
    for f in fracs:
        origin = lva + f * axis
        in_plane = rva - origin
        in_plane = in_plane - np.dot(in_plane, normal) * normal
        if np.linalg.norm(in_plane) < 1e-9:
            raise GeometryError("RVA lies on the LVA-MV axis; SAX orientation undefined")
        left = _unit(in_plane)
        right = -left
        up = np.cross(right, normal)
        planes.append(PlaneSpec(origin, normal, up, right, extent, resolution))
    return planes


def render_plane(v: Volume3, plane: PlaneSpec) -> np.ndarray:
    """Multiplanar reformation: trilinear samples on the plane's pixel grid.

    Returns a (rows, cols) float array; out-of-volume pixels are 0. Row 0
    is the top of the image (largest up-coordinate).
    """
    nu, nv = plane.resolution
    w, h = plane.extent_mm
    us = np.linspace(-w / 2.0, w / 2.0, nu)
    ws = np.linspace(h / 2.0, -h / 2.0, nv)
    pts = (plane.origin
           + ws[:, None, None] * plane.up
           + us[None, :, None] * plane.right)
    values = trilinear_sample(v, pts.reshape(-1, 3))
    return values.reshape(nv, nu)


def render_cine(s: Series4D, plane: PlaneSpec) -> list[np.ndarray]:
    """Render every frame against the same fixed plane."""
    return [render_plane(f, plane) for f in s.frames]


def write_cine_pgm(frames: list[np.ndarray], out_dir, plane: PlaneSpec) -> list[Path]:
    """Write a cine as numbered 8-bit PGM files plus a plane manifest.

    Brightness is min-max scaled over the whole cine, not per frame, so
    intensity is temporally stable.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stack = np.stack(frames)
    lo = float(stack.min())
    hi = float(stack.max())
    if hi > lo:
        scaled = np.clip((stack - lo) / (hi - lo) * 255.0, 0, 255)
    else:
        scaled = np.zeros_like(stack)
    scaled = scaled.astype(np.uint8)
    paths = []
    for t, img in enumerate(scaled):
        path = out_dir / f"frame_{t:03d}.pgm"
        rows, cols = img.shape
        header = f"P5\n{cols} {rows}\n255\n".encode()
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(header + img.tobytes())
        os.replace(tmp, path)
        paths.append(path)
    manifest = dict(plane.to_json(), frames=len(frames), value_range=[lo, hi])
    mpath = out_dir / "plane.json"
    tmp = mpath.with_name(mpath.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, mpath)
    return paths
