"""Five-step volume preprocessing applied before both network stages.

Order is fixed: isotropic cube resample, percentile clip, min-max
normalization, 3D CLAHE, then per-volume standardization. The crop stage
reuses steps two to five on an already-cubic input via
:func:`intensity_chain`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import AffineTransform, Volume3, resample_isotropic


@dataclass
class PrepConfig:
    target_edge: int = 64
    clip_lo_pct: float = 1.0
    clip_hi_pct: float = 99.0
    clahe_tiles: int = 8
    clahe_clip: float = 2.0
    clahe_bins: int = 256

    def __post_init__(self):
        if not (0 <= self.clip_lo_pct < self.clip_hi_pct <= 100):
            raise ValueError(
                f"need 0 <= lo < hi <= 100, got {self.clip_lo_pct}, {self.clip_hi_pct}"
            )
        if self.clahe_tiles < 1 or self.target_edge % self.clahe_tiles != 0:
            raise ValueError(
                f"clahe_tiles ({self.clahe_tiles}) must be >= 1 and divide "
                f"target_edge ({self.target_edge})"
            )
        if self.clahe_clip < 1:
            raise ValueError("clahe_clip must be >= 1")
        if self.clahe_bins < 2:
            raise ValueError("clahe_bins must be >= 2")

    def to_json(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_json(cls, obj: dict) -> "PrepConfig":
        return cls(**obj)


def nearest_rank_percentile(values: np.ndarray, q: float) -> float:
    """Nearest-rank percentile: the ceil(q/100 * N)-th smallest value."""
    flat = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = flat.size
    rank = max(1, int(np.ceil(q / 100.0 * n)))
    return float(flat[rank - 1])


def percentile_clip(v: Volume3, lo_pct: float = 1.0, hi_pct: float = 99.0) -> Volume3:
    """Clamp values to the nearest-rank [lo, hi] percentile range."""
    if not (0 <= lo_pct < hi_pct <= 100):
        raise ValueError(f"need 0 <= lo < hi <= 100, got {lo_pct}, {hi_pct}")
    lo = nearest_rank_percentile(v.data, lo_pct)
    hi = nearest_rank_percentile(v.data, hi_pct)
    return v.with_data(np.clip(v.data, lo, hi))


def minmax_normalize(v: Volume3) -> Volume3:
    """Rescale to [0, 1]; a constant volume maps to all zeros."""
    lo = float(v.data.min())
    hi = float(v.data.max())
    if hi == lo:
        return v.with_data(np.zeros(v.dims, dtype=np.float32))
    return v.with_data((v.data.astype(np.float64) - lo) / (hi - lo))


def center_scale(v: Volume3) -> Volume3:
    """Standardize to mean 0, population std 1; zero-variance maps to zeros."""
    data = v.data.astype(np.float64)
    mu = data.mean()
    sd = data.std()
    if sd == 0:
        return v.with_data(np.zeros(v.dims, dtype=np.float32))
    return v.with_data((data - mu) / sd)


def _tile_mappings(data: np.ndarray, tiles: int, clip: float, bins: int):
    """Per-tile clipped-CDF value mappings.

    Returns (cdf, bin_index) where cdf has shape (tiles**3, bins) and
    bin_index assigns each voxel its histogram bin. Tiles without dynamic
    range map identically to 0.
    """
    nx, ny, nz = data.shape
    mx, my, mz = nx // tiles, ny // tiles, nz // tiles
    tile_vox = mx * my * mz

    bin_idx = np.minimum((data * bins).astype(np.int64), bins - 1)
    bin_idx = np.maximum(bin_idx, 0)

    ti = np.arange(nx) // mx
    tj = np.arange(ny) // my
    tk = np.arange(nz) // mz
    tile_flat = (ti[:, None, None] * tiles + tj[None, :, None]) * tiles + tk[None, None, :]

    hist = np.bincount(
        (tile_flat * bins + bin_idx).ravel(), minlength=tiles**3 * bins
    ).reshape(tiles**3, bins).astype(np.float64)

    limit = clip * tile_vox / bins
    excess = np.maximum(hist - limit, 0.0).sum(axis=1, keepdims=True)
    hist = np.minimum(hist, limit) + excess / bins
    cdf = np.cumsum(hist, axis=1) / tile_vox

    # degenerate tiles (no dynamic range) are decided to map to 0
    blocks = data.reshape(tiles, mx, tiles, my, tiles, mz)
    blocks = blocks.transpose(0, 2, 4, 1, 3, 5).reshape(tiles**3, tile_vox)
    degenerate = blocks.max(axis=1) == blocks.min(axis=1)
    cdf[degenerate] = 0.0
    return cdf, bin_idx


def _axis_interp(n: int, tile_size: int, tiles: int):
    """Neighbor tile indices and blend weight along one axis."""
    g = (np.arange(n) + 0.5) / tile_size - 0.5
    left = np.floor(g).astype(np.int64)
    w_hi = g - left
    lo = np.clip(left, 0, tiles - 1)
    hi = np.clip(left + 1, 0, tiles - 1)
    return lo, hi, w_hi


def clahe3d(v: Volume3, cfg: PrepConfig) -> Volume3:
    """Contrast-limited adaptive histogram equalization in 3D.

    Per-tile histograms are clipped at ``clahe_clip`` times the uniform
    bin height with the excess redistributed evenly; each voxel blends
    the clipped-CDF mappings of its (up to) 8 surrounding tile centers
    trilinearly. Input must lie in [0, 1]; output lies in [0, 1].
    """
    data = np.asarray(v.data, dtype=np.float64)
    if data.min() < -1e-6 or data.max() > 1 + 1e-6:
        raise ValueError("clahe3d input must lie in [0, 1]")
    data = np.clip(data, 0.0, 1.0)
    tiles = cfg.clahe_tiles
    for axis, n in enumerate(v.dims):
        if n % tiles != 0:
            raise ValueError(
                f"dims[{axis}] = {n} is not divisible by clahe_tiles = {tiles}"
            )

    cdf, bin_idx = _tile_mappings(data, tiles, cfg.clahe_clip, cfg.clahe_bins)

    nx, ny, nz = v.dims
    x_lo, x_hi, wx = _axis_interp(nx, nx // tiles, tiles)
    y_lo, y_hi, wy = _axis_interp(ny, ny // tiles, tiles)
    z_lo, z_hi, wz = _axis_interp(nz, nz // tiles, tiles)

    out = np.zeros(v.dims, dtype=np.float64)
    for cx, tx, fx in ((0, x_lo, 1 - wx), (1, x_hi, wx)):
        for cy, ty, fy in ((0, y_lo, 1 - wy), (1, y_hi, wy)):
            for cz, tz, fz in ((0, z_lo, 1 - wz), (1, z_hi, wz)):
                t_flat = (tx[:, None, None] * tiles + ty[None, :, None]) * tiles \
                    + tz[None, None, :]
                w = fx[:, None, None] * fy[None, :, None] * fz[None, None, :]
                out += w * cdf[t_flat, bin_idx]
    return v.with_data(out)


def intensity_chain(v: Volume3, cfg: PrepConfig) -> Volume3:
    """Steps two to five: clip, min-max, CLAHE, standardize."""
    out = percentile_clip(v, cfg.clip_lo_pct, cfg.clip_hi_pct)
    out = minmax_normalize(out)
    out = clahe3d(out, cfg)
    return center_scale(out)


def preprocess(v: Volume3, cfg: PrepConfig) -> tuple[Volume3, AffineTransform]:
    """Full five-step chain; the transform maps cube voxels to source world mm."""
    cube, tf = resample_isotropic(v, cfg.target_edge)
    return intensity_chain(cube, cfg), tf
