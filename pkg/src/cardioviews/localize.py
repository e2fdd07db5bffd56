"""Stage coupling: box extraction, cropping, heatmap codec, aggregation, metrics.

The bounding box comes out of a foreground probability map by projecting
it onto each axis and reading where the normalized cumulative sum first
crosses the low and high thresholds. Crops are expanded to a physical
cube before isotropic resampling, so landmark-stage inputs are always
``target_edge**3`` with a single transform back to source world mm.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .volume import (
    LANDMARK_ORDER,
    AffineTransform,
    LandmarkId,
    LandmarkSet,
    Volume3,
    sample_cube,
)

log = logging.getLogger(__name__)


class EmptyMaskError(ValueError):
    """Probability map carries no mass; caller should fall back to the full volume."""


@dataclass
class BBox:
    """Inclusive voxel index bounds, axis order (x, y, z)."""

    min_idx: tuple[int, int, int]
    max_idx: tuple[int, int, int]

    def __post_init__(self):
        self.min_idx = tuple(int(i) for i in self.min_idx)
        self.max_idx = tuple(int(i) for i in self.max_idx)
        for a in range(3):
            if not (0 <= self.min_idx[a] <= self.max_idx[a]):
                raise ValueError(f"invalid bounds on axis {a}: {self.min_idx} .. {self.max_idx}")

    def validate_in(self, dims) -> "BBox":
        for a in range(3):
            if self.max_idx[a] >= dims[a]:
                raise ValueError(f"box exceeds dims on axis {a}: {self.max_idx} vs {dims}")
        return self

    def voxel_count(self) -> int:
        return int(np.prod([mx - mn + 1 for mn, mx in zip(self.min_idx, self.max_idx)]))

    def contains_voxel(self, idx) -> bool:
        return all(self.min_idx[a] <= idx[a] <= self.max_idx[a] for a in range(3))

    @classmethod
    def full(cls, dims) -> "BBox":
        return cls((0, 0, 0), tuple(d - 1 for d in dims))

    def to_json(self):
        return [list(self.min_idx), list(self.max_idx)]

    @classmethod
    def from_json(cls, obj) -> "BBox":
        return cls(tuple(obj[0]), tuple(obj[1]))


def box_mask(box: BBox, dims) -> np.ndarray:
    mask = np.zeros(dims, dtype=bool)
    (x0, y0, z0), (x1, y1, z1) = box.min_idx, box.max_idx
    mask[x0:x1 + 1, y0:y1 + 1, z0:z1 + 1] = True
    return mask


def mask_to_bbox(prob: Volume3, lo: float = 0.05, hi: float = 0.95) -> BBox:
    """Box from per-axis cumulative-mass thresholds of a probability map.

    Each axis profile is the sum over the other two axes; the bound is
    the first index where the normalized cumulative sum reaches ``lo``
    (respectively ``hi``).
    """
    data = prob.data.astype(np.float64)
    if data.min() < 0:
        raise ValueError("probability map must be non-negative")
    total = data.sum()
    if total <= 0:
        raise EmptyMaskError("probability map has zero total mass")
    mins, maxs = [], []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        cum = np.cumsum(data.sum(axis=other)) / total
        mins.append(int(np.argmax(cum >= lo)))
        maxs.append(int(np.argmax(cum >= hi)))
    return BBox(tuple(mins), tuple(maxs))


def crop_resize(v: Volume3, box: BBox, target_edge: int = 64,
                margin: float = 0.0) -> tuple[Volume3, AffineTransform]:
    """Crop a box and resample it to an isotropic cube.

    The crop region (not the content) is expanded to a physical cube
    centered on the box, so the cube side equals the box's longest
    physical extent times ``1 + margin``. Returns the cube volume and
    the cube-voxel-to-source-world transform.
    """
    box.validate_in(v.dims)
    spacing = np.asarray(v.spacing)
    mn = np.asarray(box.min_idx, float)
    mx = np.asarray(box.max_idx, float)
    center = np.asarray(v.origin) + (mn + mx) / 2.0 * spacing
    side = float(((mx - mn) * spacing).max()) * (1.0 + margin)
    if side <= 0:
        side = float(max(v.spacing))
    s = side / (target_edge - 1)
    out_origin = center - s * (target_edge - 1) / 2.0
    return sample_cube(v, out_origin, s, target_edge)


def transform_box(box: BBox, tf: AffineTransform, target: Volume3) -> BBox:
    """Map a box through a grid-to-world transform into another volume's grid.

    Conservative: floors the low corner, ceils the high one, clamps to
    the target grid.
    """
    corners = np.array([
        [box.min_idx[0], box.min_idx[1], box.min_idx[2]],
        [box.max_idx[0], box.max_idx[1], box.max_idx[2]],
    ], dtype=float)
    world = tf.apply(corners)
    vox = (world - np.asarray(target.origin)) / np.asarray(target.spacing)
    lo = np.floor(vox.min(axis=0)).astype(int)
    hi = np.ceil(vox.max(axis=0)).astype(int)
    dims = np.asarray(target.dims)
    lo = np.clip(lo, 0, dims - 1)
    hi = np.clip(hi, 0, dims - 1)
    return BBox(tuple(lo), tuple(hi))


@dataclass
class HeatmapStack:
    """Six-channel landmark likelihood cube with per-channel annotation mask.

    Channel order follows LandmarkId declaration order. ``oob`` flags
    channels masked because their landmark fell outside the cube.
    """

    data: np.ndarray
    mask: tuple[bool, ...]
    oob: tuple[bool, ...] = (False,) * 6

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or self.data.shape[0] != len(LANDMARK_ORDER):
            raise ValueError(f"heatmap stack must be (6, E, E, E), got {self.data.shape}")
        self.mask = tuple(bool(m) for m in self.mask)
        self.oob = tuple(bool(m) for m in self.oob)
        if len(self.mask) != 6 or len(self.oob) != 6:
            raise ValueError("mask and oob need one flag per landmark channel")

    @property
    def edge(self) -> int:
        return self.data.shape[1]


def encode_heatmaps(lms: LandmarkSet, transform: AffineTransform,
                    sigma_vox: float = 2.0, edge: int = 64) -> HeatmapStack:
    """Unit-peak isotropic Gaussians around each annotated landmark.

    ``transform`` maps cube voxel coordinates to world mm (as returned
    by crop_resize); landmarks landing outside the cube are masked and
    flagged. The Gaussian uses cube-voxel units, sigma_vox defaulting to
    2 (variance 4 voxels); each annotated channel is normalized so its
    nearest voxel peaks at exactly 1.
    """
    if sigma_vox <= 0:
        raise ValueError("sigma_vox must be positive")
    inv = transform.inverse()
    ax = np.arange(edge, dtype=np.float64)
    data = np.zeros((len(LANDMARK_ORDER), edge, edge, edge), dtype=np.float32)
    mask = [False] * 6
    oob = [False] * 6
    for ch, lid in enumerate(LANDMARK_ORDER):
        if lid not in lms:
            continue
        q = inv.apply(lms[lid])
        if (q < 0).any() or (q > edge - 1).any():
            oob[ch] = True
            log.warning("landmark %s at cube coords %s is outside the %d^3 cube; "
                        "channel masked", lid.value, np.round(q, 2), edge)
            continue
        gx = np.exp(-((ax - q[0]) ** 2) / (2 * sigma_vox**2))
        gy = np.exp(-((ax - q[1]) ** 2) / (2 * sigma_vox**2))
        gz = np.exp(-((ax - q[2]) ** 2) / (2 * sigma_vox**2))
        peak = gx.max() * gy.max() * gz.max()
        channel = gx[:, None, None] * gy[None, :, None] * gz[None, None, :]
        data[ch] = channel / peak
        mask[ch] = True
    return HeatmapStack(data, tuple(mask), tuple(oob))


def decode_peaks(h: HeatmapStack, transform: AffineTransform) -> LandmarkSet:
    """Argmax voxel per unmasked channel, mapped to world mm.

    Ties break to the lowest linear index of the (x, y, z) grid in
    C order.
    """
    points = {}
    edge = h.edge
    for ch, lid in enumerate(LANDMARK_ORDER):
        if not h.mask[ch]:
            continue
        flat = int(np.argmax(h.data[ch]))
        idx = np.unravel_index(flat, (edge, edge, edge))
        points[lid] = transform.apply(np.asarray(idx, dtype=float))
    return LandmarkSet(points)


def temporal_median(per_frame: list[LandmarkSet]) -> LandmarkSet:
    """Componentwise median over the frames where each landmark is present."""
    if len(per_frame) < 1:
        raise ValueError("temporal_median needs at least one frame")
    points = {}
    for lid in LANDMARK_ORDER:
        stack = [f[lid] for f in per_frame if lid in f]
        if stack:
            points[lid] = np.median(np.stack(stack), axis=0)
    return LandmarkSet(points)


def landmark_errors(pred: LandmarkSet, truth: LandmarkSet) -> dict[LandmarkId, float]:
    """Euclidean distance in mm for landmarks present in both sets."""
    return {
        lid: float(np.linalg.norm(pred[lid] - truth[lid]))
        for lid in LANDMARK_ORDER
        if lid in pred and lid in truth
    }


def bbox_metrics(pred_map: Volume3, truth_box: BBox, landmarks: LandmarkSet,
                 lo: float = 0.05, hi: float = 0.95, threshold: float = 0.5,
                 pred_box: BBox | None = None) -> dict:
    """Containment/volume/Dice/accuracy of a predicted foreground map.

    containment_fraction: ground-truth landmarks whose nearest voxel lies
    inside the extracted box. volume_fraction: extracted box volume over
    the full grid. Dice and per-voxel accuracy compare the thresholded
    map against the ground-truth box mask.
    """
    truth_box.validate_in(pred_map.dims)
    if pred_box is None:
        try:
            pred_box = mask_to_bbox(pred_map, lo, hi)
        except EmptyMaskError:
            pred_box = BBox.full(pred_map.dims)
    inside = 0
    n_lms = 0
    for _, p in landmarks.items():
        n_lms += 1
        vox = np.round((p - np.asarray(pred_map.origin)) / np.asarray(pred_map.spacing))
        if pred_box.contains_voxel(vox):
            inside += 1
    containment = inside / n_lms if n_lms else float("nan")

    pred_mask = pred_map.data >= threshold
    truth_mask = box_mask(truth_box, pred_map.dims)
    overlap = int((pred_mask & truth_mask).sum())
    denom = int(pred_mask.sum()) + int(truth_mask.sum())
    dice = 2.0 * overlap / denom if denom else 1.0
    accuracy = float((pred_mask == truth_mask).mean())
    return {
        "containment_fraction": containment,
        "volume_fraction": pred_box.voxel_count() / pred_map.nvox,
        "dice": dice,
        "pixel_accuracy": accuracy,
        "pred_box": pred_box,
    }
