"""Training-time distortions, applied consistently to a volume and its landmarks.

Geometry first (affine, then elastic, then flips), intensity second
(brightness, contrast, noise, blur). The volume is resampled once
through the composed inverse map; landmark coordinates go through the
exact forward map, so they are never quantized to the grid. Components
with magnitude zero are identities, and an all-zero config returns the
input volume bit-identically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .volume import LandmarkSet, Volume3, trilinear_sample


@dataclass
class AugConfig:
    flip_enabled: tuple[bool, bool, bool] = (False, False, False)
    noise_sigma: float = 0.0
    elastic_alpha: float = 0.0      # peak displacement, voxels
    elastic_sigma: float = 4.0      # smoothing width, voxels
    affine_max_rot: float = 0.0     # radians
    affine_max_scale: float = 0.0   # fractional
    affine_max_shift: float = 0.0   # voxels
    brightness_delta: float = 0.0
    contrast_range: float = 0.0
    blur_sigma: float = 0.0         # voxels
    seed: int = 0

    def __post_init__(self):
        self.flip_enabled = tuple(bool(f) for f in self.flip_enabled)
        if len(self.flip_enabled) != 3:
            raise ValueError("flip_enabled needs one boolean per axis")
        for name in ("noise_sigma", "elastic_alpha", "elastic_sigma",
                     "affine_max_rot", "affine_max_scale", "affine_max_shift",
                     "brightness_delta", "contrast_range", "blur_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        d["flip_enabled"] = list(self.flip_enabled)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "AugConfig":
        obj = dict(obj)
        if "flip_enabled" in obj:
            obj["flip_enabled"] = tuple(obj["flip_enabled"])
        return cls(**obj)


def elastic_field(dims, alpha: float, sigma: float, rng: np.random.Generator):
    """Smoothed white-noise displacement field, scaled to peak magnitude alpha.

    Returns an array (3, nx, ny, nz) in voxel units.
    """
    dims = tuple(int(d) for d in dims)
    if alpha < 0 or sigma < 0:
        raise ValueError("alpha and sigma must be >= 0")
    if alpha == 0:
        return np.zeros((3,) + dims)
    raw = rng.standard_normal((3,) + dims)
    if sigma > 0:
        raw = np.stack([gaussian_filter(c, sigma, mode="reflect") for c in raw])
    mags = np.sqrt((raw * raw).sum(axis=0))
    peak = mags.max()
    if peak == 0:
        return np.zeros((3,) + dims)
    return raw * (alpha / peak)


def _rotation_matrix(rx: float, ry: float, rz: float) -> np.ndarray:
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return mz @ my @ mx


class GeometryDraw:
    """One realization of the geometric distortions (affine, elastic, flips)."""

    def __init__(self, v: Volume3, rot_m=None, shift_mm=None, field=None, flip=None):
        self.center = v.world_center()
        self.spacing = np.asarray(v.spacing)
        self.origin = np.asarray(v.origin)
        self.has_affine = rot_m is not None
        self.rot_m = np.asarray(rot_m, float) if rot_m is not None else None
        self.shift_mm = (np.asarray(shift_mm, float) if shift_mm is not None
                         else np.zeros(3))
        self.field = field
        self.flip = np.asarray(flip, float) if flip is not None else np.ones(3)
        self.has_geometry = (self.has_affine or self.field is not None
                             or (self.flip < 0).any())

    @classmethod
    def sample(cls, v: Volume3, cfg: AugConfig, rng: np.random.Generator):
        rot_m = shift_mm = None
        if cfg.affine_max_rot > 0 or cfg.affine_max_scale > 0 or cfg.affine_max_shift > 0:
            rot = rng.uniform(-cfg.affine_max_rot, cfg.affine_max_rot, 3)
            scale = rng.uniform(1 - cfg.affine_max_scale, 1 + cfg.affine_max_scale)
            shift = rng.uniform(-cfg.affine_max_shift, cfg.affine_max_shift, 3)
            rot_m = _rotation_matrix(*rot) * scale
            shift_mm = shift * np.asarray(v.spacing)
        field = None
        if cfg.elastic_alpha > 0:
            field = elastic_field(v.dims, cfg.elastic_alpha, cfg.elastic_sigma, rng)
        flip = np.ones(3)
        for a in range(3):
            if cfg.flip_enabled[a] and rng.random() < 0.5:
                flip[a] = -1.0
        return cls(v, rot_m, shift_mm, field, flip)

    # forward pieces (content motion); each has an explicit inverse
    def affine_fwd(self, p):
        if not self.has_affine:
            return p
        return (p - self.center) @ self.rot_m.T + self.center + self.shift_mm

    def affine_inv(self, p):
        if not self.has_affine:
            return p
        inv = np.linalg.inv(self.rot_m)
        return (p - self.center - self.shift_mm) @ inv.T + self.center

    def flip_fwd(self, p):
        return (p - self.center) * self.flip + self.center

    def _disp_mm(self, pts):
        """Displacement d(p) in mm at world points, edge-clamped."""
        vox = (np.atleast_2d(pts) - self.origin) / self.spacing
        d = np.stack([
            map_coordinates(self.field[a], vox.T, order=1, mode="nearest")
            for a in range(3)
        ], axis=-1)
        return d * self.spacing

    def elastic_inv(self, p):
        """Pullback map: where the warped image reads from."""
        if self.field is None:
            return p
        return p + self._disp_mm(p).reshape(np.shape(p))

    def elastic_fwd(self, p, tol=1e-10, max_iter=50):
        """Forward warp of a point: fixed-point inversion of p + d(p)."""
        if self.field is None:
            return p
        y = np.array(p, dtype=float)
        for _ in range(max_iter):
            step = np.asarray(p) - self._disp_mm(y).reshape(y.shape) - y
            y = y + step
            if np.abs(step).max() < tol:
                break
        return y

    def point_fwd(self, p):
        return self.flip_fwd(self.elastic_fwd(self.affine_fwd(p)))

    def sample_points(self, pts):
        """Composed inverse map for volume resampling."""
        return self.affine_inv(self.elastic_inv(self.flip_fwd(pts)))


def warp_sample(v: Volume3, lms: LandmarkSet,
                draw: GeometryDraw) -> tuple[Volume3, LandmarkSet]:
    """Apply a specific geometric draw: volume resampled once through the
    composed inverse map, landmarks through the exact forward map."""
    if not draw.has_geometry:
        return v.with_data(v.data), LandmarkSet({l: p.copy() for l, p in lms.items()})
    idx = np.indices(v.dims).reshape(3, -1).T.astype(float)
    pts = idx * draw.spacing + draw.origin
    data = trilinear_sample(v, draw.sample_points(pts)).reshape(v.dims)
    out_lms = LandmarkSet({lid: draw.point_fwd(p) for lid, p in lms.items()})
    return v.with_data(data), out_lms


def augment_sample(v: Volume3, lms: LandmarkSet, cfg: AugConfig,
                   rng: np.random.Generator) -> tuple[Volume3, LandmarkSet]:
    """Apply one distortion draw to a volume and its landmark set."""
    warped, out_lms = warp_sample(v, lms, GeometryDraw.sample(v, cfg, rng))
    data = warped.data

    if cfg.brightness_delta > 0:
        data = data + rng.uniform(-cfg.brightness_delta, cfg.brightness_delta)
    if cfg.contrast_range > 0:
        c = rng.uniform(1 - cfg.contrast_range, 1 + cfg.contrast_range)
        mu = data.mean()
        data = mu + (data - mu) * c
    if cfg.noise_sigma > 0:
        data = data + rng.normal(0.0, cfg.noise_sigma, v.dims)
    if cfg.blur_sigma > 0:
        s = rng.uniform(0.0, cfg.blur_sigma)
        if s > 0:
            data = gaussian_filter(np.asarray(data, dtype=np.float64), s,
                                   mode="nearest")
    return v.with_data(data), out_lms
