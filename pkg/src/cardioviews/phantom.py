"""Synthetic cardiac phantoms with analytically known ground truth.

A phantom is two intersecting bright ellipsoidal shells (left and right
ventricle) with darker blood pools on a textured background, plus a
bright torus at each valve ring. The six landmarks are placed
analytically: the apexes at the shells' extremal points along the long
axis, the valves at their ring centers on the basal side. A periodic
contraction scales the heart over the cycle, moving the landmarks
consistently. Phantoms are intentionally simple; they exercise the
pipeline's mechanics, not clinical realism.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .localize import BBox
from .mvol import read_landmarks, read_mvol, write_landmarks, write_mvol
from .volume import LandmarkId, LandmarkSet, Series4D, Volume3

L = LandmarkId


@dataclass
class PhantomParams:
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    lv_long_mm: tuple[float, float] = (15.0, 20.0)     # semi-axis range
    lv_short_mm: tuple[float, float] = (9.0, 12.5)
    wall_mm: tuple[float, float] = (2.5, 4.0)
    rv_scale: tuple[float, float] = (0.75, 0.9)        # relative to the LV
    valve_radius_mm: tuple[float, float] = (3.2, 4.6)
    max_rot: float = 0.3                               # radians per axis
    max_shift_mm: float = 5.0
    contraction: float = 0.12
    frames: int = 3
    texture: float = 0.1
    bbox_margin_vox: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        for name in ("lv_long_mm", "lv_short_mm", "wall_mm", "rv_scale",
                     "valve_radius_mm"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"{name} range must be positive and ordered")
        if not (0 <= self.contraction < 1):
            raise ValueError("contraction must be in [0, 1)")
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        for key in ("dims", "spacing", "lv_long_mm", "lv_short_mm", "wall_mm",
                    "rv_scale", "valve_radius_mm"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "PhantomParams":
        obj = dict(obj)
        for key in ("dims", "spacing", "lv_long_mm", "lv_short_mm", "wall_mm",
                    "rv_scale", "valve_radius_mm"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return cls(**obj)


def _rot_zyx(rx, ry, rz):
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return mz @ my @ mx


def _inside(h, center, axes):
    d = (h - center) / axes
    return (d * d).sum(axis=-1) <= 1.0


def _ring_mask(h, center, radius, tube):
    rel = h - center
    rho = np.sqrt(rel[..., 0] ** 2 + rel[..., 1] ** 2)
    return (rho - radius) ** 2 + rel[..., 2] ** 2 <= tube**2


@dataclass
class _Anatomy:
    """One sampled heart in its own (pre-pose) coordinate frame."""

    lv_axes: np.ndarray
    lv_wall: float
    rv_axes: np.ndarray
    rv_center: np.ndarray
    rv_wall: float
    valve_r: dict
    landmarks: dict


def _sample_anatomy(params: PhantomParams, rng) -> _Anatomy:
    a = rng.uniform(*params.lv_long_mm)
    b = rng.uniform(*params.lv_short_mm)
    wall = rng.uniform(*params.wall_mm)
    rvs = rng.uniform(*params.rv_scale)
    ra, rb = a * rvs, b * rvs
    rv_center = np.array([b + 0.3 * rb, 0.0, a - ra])
    valve_r = {lid: rng.uniform(*params.valve_radius_mm)
               for lid in (L.MV, L.AV, L.PV, L.TV)}

    mv = np.array([0.0, 0.0, a])
    av = mv + 1.7 * valve_r[L.AV] * np.array([0.0, -1.0, 0.0])
    rv_base = rv_center + np.array([0.0, 0.0, ra])
    pv = rv_base + 1.7 * valve_r[L.PV] * np.array([0.28735, -0.95783, 0.0])
    tv = rv_base + 1.7 * valve_r[L.TV] * np.array([0.4472, 0.89443, 0.0])
    landmarks = {
        L.LVA: np.array([0.0, 0.0, -a]),
        L.MV: mv,
        L.AV: av,
        L.RVA: rv_center + np.array([0.0, 0.0, -ra]),
        L.PV: pv,
        L.TV: tv,
    }
    return _Anatomy(np.array([b, b, a]), wall, np.array([rb, rb, ra]),
                    rv_center, 0.6 * wall, valve_r, landmarks)


def _check_plausibility(anatomy: _Anatomy, scale: float):
    pts = {lid: p * scale for lid, p in anatomy.landmarks.items()}
    lv_len = np.linalg.norm(pts[L.MV] - pts[L.LVA])
    if lv_len <= max(anatomy.valve_r.values()):
        raise AssertionError("LV long axis shorter than a valve ring radius")
    if np.linalg.norm(pts[L.AV] - pts[L.MV]) > 2 * anatomy.valve_r[L.AV] + 1e-9:
        raise AssertionError("AV ring strayed beyond 2 ring radii of the MV")
    ids = list(pts)
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            if np.linalg.norm(pts[a] - pts[b]) < 4.0:
                raise AssertionError(
                    f"landmarks {a.value} and {b.value} closer than 4 mm")


def generate_phantom(params: PhantomParams, rng: np.random.Generator
                     ) -> tuple[Series4D, dict[int, LandmarkSet], BBox]:
    """One phantom study: image frames, per-frame landmarks, ground-truth box."""
    anatomy = _sample_anatomy(params, rng)
    rot = _rot_zyx(*rng.uniform(-params.max_rot, params.max_rot, 3))
    dims = params.dims
    spacing = np.asarray(params.spacing)
    center = (np.asarray(dims) - 1) * spacing / 2.0
    shift = rng.uniform(-params.max_shift_mm, params.max_shift_mm, 3)
    pose_t = center + shift

    texture = None
    if params.texture > 0:
        raw = gaussian_filter(rng.standard_normal(dims), 4.0, mode="reflect")
        span = raw.max() - raw.min()
        texture = (raw - raw.min()) / span * params.texture if span > 0 else None

    idx = np.indices(dims).astype(np.float64)
    world = np.stack([idx[a] * spacing[a] for a in range(3)], axis=-1)
    rel = (world - pose_t) @ rot  # == rot.T applied to row vectors

    frames = []
    per_frame: dict[int, LandmarkSet] = {}
    lo_w = np.full(3, np.inf)
    hi_w = np.full(3, -np.inf)
    tube = 1.4
    for f in range(params.frames):
        s = 1.0 - params.contraction * (1 - np.cos(2 * np.pi * f / params.frames)) / 2.0
        _check_plausibility(anatomy, s)
        h = rel / s

        img = np.full(dims, 0.05)
        if texture is not None:
            img += texture
        lv_out = _inside(h, np.zeros(3), anatomy.lv_axes)
        lv_in = _inside(h, np.zeros(3), np.maximum(anatomy.lv_axes - anatomy.lv_wall,
                                                   0.55 * anatomy.lv_axes))
        rv_out = _inside(h, anatomy.rv_center, anatomy.rv_axes)
        rv_in = _inside(h, anatomy.rv_center,
                        np.maximum(anatomy.rv_axes - anatomy.rv_wall,
                                   0.55 * anatomy.rv_axes))
        img[rv_in] = 0.35
        img[rv_out & ~rv_in] = 0.7
        img[lv_in] = 0.4
        img[lv_out & ~lv_in] = 0.85
        for lid in (L.MV, L.AV, L.PV, L.TV):
            ring = _ring_mask(h, anatomy.landmarks[lid], anatomy.valve_r[lid] / s,
                              tube / s)
            img[ring] = 0.95
        img = gaussian_filter(img, 0.6, mode="nearest")
        frames.append(Volume3(dims, tuple(spacing), (0.0, 0.0, 0.0),
                              img.astype(np.float32)))

        lms = {lid: rot @ (s * p) + pose_t for lid, p in anatomy.landmarks.items()}
        extent_hi = (np.asarray(dims) - 1) * spacing
        for lid, pts in lms.items():
            if (pts < 0).any() or (pts > extent_hi).any():
                raise ValueError(
                    f"phantom parameters place {lid.value} outside the volume "
                    f"at frame {f}; shrink the anatomy or pose ranges")
        per_frame[f] = LandmarkSet(lms)
        for pts in lms.values():
            lo_w = np.minimum(lo_w, pts)
            hi_w = np.maximum(hi_w, pts)
        for c_h, axes in ((np.zeros(3), anatomy.lv_axes),
                          (anatomy.rv_center, anatomy.rv_axes)):
            c_w = rot @ (s * c_h) + pose_t
            half = s * np.sqrt(((rot * axes[None, :]) ** 2).sum(axis=1))
            lo_w = np.minimum(lo_w, c_w - half)
            hi_w = np.maximum(hi_w, c_w + half)

    m = params.bbox_margin_vox
    lo_idx = np.clip(np.floor(lo_w / spacing).astype(int) - m, 0,
                     np.asarray(dims) - 1)
    hi_idx = np.clip(np.ceil(hi_w / spacing).astype(int) + m, 0,
                     np.asarray(dims) - 1)
    return Series4D(frames), per_frame, BBox(tuple(lo_idx), tuple(hi_idx))


@dataclass
class Study:
    """One annotated case: image series, per-frame landmarks, box ground truth."""

    patient_id: str
    series: Series4D
    annotations: dict[int, LandmarkSet]
    bbox: BBox


def phantom_dataset(n: int, params: PhantomParams, seed: int,
                    drop_fraction: float = 0.0) -> list[Study]:
    """Generate n independent phantom studies with patient-style identifiers.

    ``drop_fraction`` randomly removes that fraction of landmark
    annotations per frame, exercising the masked landmark loss.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not (0 <= drop_fraction < 1):
        raise ValueError("drop_fraction must be in [0, 1)")
    children = np.random.SeedSequence(seed).spawn(n)
    studies = []
    for i in range(n):
        rng = np.random.default_rng(children[i])
        series, per_frame, bbox = generate_phantom(params, rng)
        if drop_fraction > 0:
            kept: dict[int, LandmarkSet] = {}
            for f, lms in per_frame.items():
                kept[f] = LandmarkSet({
                    lid: p for lid, p in lms.items()
                    if rng.random() >= drop_fraction
                })
            per_frame = kept
        studies.append(Study(f"phantom_{i:04d}", series, per_frame, bbox))
    return studies


def write_dataset(studies: list[Study], out_dir, extra: dict | None = None) -> Path:
    """Write MVOL + landmark JSON files plus a dataset manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for st in studies:
        mvol_name = f"{st.patient_id}.mvol"
        lm_name = f"{st.patient_id}.landmarks.json"
        write_mvol(st.series, out_dir / mvol_name)
        write_landmarks(st.annotations, out_dir / lm_name)
        rows.append({
            "id": st.patient_id,
            "mvol": mvol_name,
            "landmarks": lm_name,
            "bbox": st.bbox.to_json(),
        })
    manifest = {"patients": rows}
    if extra:
        manifest.update(extra)
    path = out_dir / "dataset.json"
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, path)
    return path


def load_dataset(path) -> list[Study]:
    """Read a dataset manifest written by :func:`write_dataset`."""
    path = Path(path)
    if path.is_dir():
        path = path / "dataset.json"
    manifest = json.loads(path.read_text())
    base = path.parent
    studies = []
    for row in manifest["patients"]:
        studies.append(Study(
            row["id"],
            read_mvol(base / row["mvol"]),
            read_landmarks(base / row["landmarks"]),
            BBox.from_json(row["bbox"]),
        ))
    return studies
