"""Volume and geometry primitives shared by the whole pipeline.

Conventions (fixed once, everything else depends on them):

* A volume is an axis-aligned scalar grid. Voxel ``(i, j, k)`` has its
  center at ``origin + (i, j, k) * spacing`` in world millimeters.
* Array axis order is ``(x, y, z)``: ``data[i, j, k]`` is the voxel at
  x-index ``i``.
* Sampling outside the grid reads zeros (zero extension).
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field

import numpy as np

Vec3 = tuple[float, float, float]


class LandmarkId(enum.Enum):
    """The six cardiac landmarks. Declaration order fixes channel order."""

    LVA = "LVA"
    RVA = "RVA"
    AV = "AV"
    MV = "MV"
    PV = "PV"
    TV = "TV"


LANDMARK_ORDER = tuple(LandmarkId)
N_LANDMARKS = len(LANDMARK_ORDER)


@dataclass
class Volume3:
    """3D scalar grid with physical spacing and origin.

    ``data`` is stored as a float32 array of shape ``dims`` indexed
    ``[i, j, k]`` for voxel (x, y, z).
    """

    dims: tuple[int, int, int]
    spacing: Vec3
    origin: Vec3
    data: np.ndarray

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be three counts >= 1, got {self.dims}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        if not all(np.isfinite(self.origin)):
            raise ValueError(f"origin must be finite, got {self.origin}")
        data = np.asarray(self.data, dtype=np.float32)
        if data.shape != self.dims:
            if data.size == int(np.prod(self.dims)):
                # flat x-fastest sequence
                data = data.reshape(self.dims, order="F")
            else:
                raise ValueError(
                    f"data has {data.size} values, dims {self.dims} need "
                    f"{int(np.prod(self.dims))}"
                )
        if not np.isfinite(data).all():
            raise ValueError("volume data contains non-finite values")
        self.data = data

    @property
    def nvox(self) -> int:
        return int(np.prod(self.dims))

    def with_data(self, data: np.ndarray) -> "Volume3":
        """Same grid, new values."""
        return Volume3(self.dims, self.spacing, self.origin, data)

    def grid_to_world(self) -> "AffineTransform":
        """Transform taking continuous voxel indices to world mm."""
        return AffineTransform(np.diag(self.spacing), np.asarray(self.origin, float))

    def world_extent(self) -> np.ndarray:
        """Center-to-center physical span per axis, mm."""
        return (np.asarray(self.dims) - 1) * np.asarray(self.spacing)

    def world_center(self) -> np.ndarray:
        return np.asarray(self.origin) + 0.5 * self.world_extent()


@dataclass
class Series4D:
    """Time sequence of geometrically identical Volume3 frames."""

    frames: list[Volume3]

    def __post_init__(self):
        if len(self.frames) < 1:
            raise ValueError("a series needs at least one frame")
        f0 = self.frames[0]
        for t, f in enumerate(self.frames):
            if f.dims != f0.dims or f.spacing != f0.spacing or f.origin != f0.origin:
                raise ValueError(f"frame {t} geometry differs from frame 0")

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.frames[0].dims

    @property
    def spacing(self) -> Vec3:
        return self.frames[0].spacing

    @property
    def origin(self) -> Vec3:
        return self.frames[0].origin


@dataclass
class LandmarkSet:
    """Partial mapping from landmark identity to a world-space point (mm)."""

    points: dict[LandmarkId, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        clean: dict[LandmarkId, np.ndarray] = {}
        for key, p in self.points.items():
            lid = key if isinstance(key, LandmarkId) else LandmarkId(key)
            arr = np.asarray(p, dtype=float).reshape(3)
            if not np.isfinite(arr).all():
                raise ValueError(f"landmark {lid.value} has non-finite coordinates")
            clean[lid] = arr
        self.points = clean

    def __contains__(self, lid: LandmarkId) -> bool:
        return lid in self.points

    def __getitem__(self, lid: LandmarkId) -> np.ndarray:
        return self.points[lid]

    def __len__(self) -> int:
        return len(self.points)

    def ids(self) -> list[LandmarkId]:
        return [lid for lid in LANDMARK_ORDER if lid in self.points]

    def items(self):
        return ((lid, self.points[lid]) for lid in self.ids())

    def to_json_points(self) -> dict[str, list[float]]:
        return {lid.value: [float(c) for c in p] for lid, p in self.items()}

    @classmethod
    def from_json_points(cls, obj: dict) -> "LandmarkSet":
        return cls({LandmarkId(name): np.asarray(p, float) for name, p in obj.items()})


@dataclass(frozen=True)
class AffineTransform:
    """World map ``x -> matrix @ x + translation`` with an invertible matrix."""

    matrix: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not (np.isfinite(m).all() and np.isfinite(t).all()):
            raise ValueError("transform entries must be finite")
        if not np.isfinite(np.linalg.cond(m)) or np.linalg.cond(m) > 1e12:
            raise ValueError("transform matrix is singular or near-singular")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "translation", t)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Apply to one point (3,) or a stack (N, 3)."""
        p = np.asarray(pts, dtype=float)
        return p @ self.matrix.T + self.translation

    def inverse(self) -> "AffineTransform":
        inv = np.linalg.inv(self.matrix)
        return AffineTransform(inv, -inv @ self.translation)

    def compose(self, inner: "AffineTransform") -> "AffineTransform":
        """Returns the map ``x -> self(inner(x))``."""
        return AffineTransform(
            self.matrix @ inner.matrix,
            self.matrix @ inner.translation + self.translation,
        )


def voxel_to_world(v: Volume3, index) -> np.ndarray:
    """World position (mm) of a continuous voxel coordinate."""
    idx = np.asarray(index, dtype=float)
    return np.asarray(v.origin) + idx * np.asarray(v.spacing)


def world_to_voxel(v: Volume3, point) -> np.ndarray:
    """Continuous voxel coordinate of a world position (mm)."""
    p = np.asarray(point, dtype=float)
    return (p - np.asarray(v.origin)) / np.asarray(v.spacing)


def trilinear_sample(v: Volume3, points) -> np.ndarray | float:
    """Trilinear interpolation at world points, zero outside the grid.

    Accepts a single point (3,) or a stack (N, 3); interpolation weights
    and accumulation run in float64.
    """
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    coords = (pts - np.asarray(v.origin)) / np.asarray(v.spacing)

    base = np.floor(coords).astype(np.int64)
    frac = coords - base
    dims = np.asarray(v.dims)
    data = v.data
    out = np.zeros(len(pts), dtype=np.float64)
    for corner in range(8):
        off = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        idx = base + off
        w = np.prod(np.where(off == 1, frac, 1.0 - frac), axis=1)
        valid = np.all((idx >= 0) & (idx < dims), axis=1)
        if not valid.any():
            continue
        iv = idx[valid]
        out[valid] += w[valid] * data[iv[:, 0], iv[:, 1], iv[:, 2]].astype(np.float64)
    return float(out[0]) if single else out


def sample_cube(v: Volume3, out_origin, s: float, edge: int) -> tuple[Volume3, AffineTransform]:
    """Resample onto an isotropic cube grid (edge voxels, spacing s, given origin)."""
    out_origin = np.asarray(out_origin, dtype=float)
    ax = np.arange(edge, dtype=float)
    gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3) * s + out_origin
    values = trilinear_sample(v, pts).reshape(edge, edge, edge)
    out = Volume3((edge, edge, edge), (s, s, s), tuple(out_origin),
                  values.astype(np.float32))
    return out, AffineTransform(np.diag([s, s, s]), out_origin)


def resample_isotropic(v: Volume3, target_edge: int) -> tuple[Volume3, AffineTransform]:
    """Resample to an isotropic cube of ``target_edge`` voxels per axis.

    One global scale is chosen so the longest center-to-center physical
    extent of the source exactly spans the cube; the content is centered
    on the other axes and zero-padded. The returned transform maps output
    voxel coordinates to source world mm.
    """
    if target_edge < 2:
        raise ValueError("target_edge must be >= 2")
    extent = v.world_extent()
    longest = float(extent.max())
    if longest <= 0:  # single-voxel source, still well defined
        longest = float(max(v.spacing))
    s = longest / (target_edge - 1)
    out_origin = v.world_center() - s * (target_edge - 1) / 2.0
    return sample_cube(v, out_origin, s, target_edge)
