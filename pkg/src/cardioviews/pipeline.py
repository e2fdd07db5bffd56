"""Orchestration: splits, the two training loops, the search protocol,
inference, view emission, and evaluation reports.

Training crops use ground-truth boxes; inference crops use the box
predicted by the first-stage network (falling back to the full volume,
with a warning, when the predicted map is empty). All randomness flows
from explicit seeds, so identical seeds give bit-identical checkpoints,
reports, and rendered images.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import AugConfig, augment_sample
from .enet3d import ENet3d, NetConfig, build_net
from .localize import (
    BBox,
    EmptyMaskError,
    HeatmapStack,
    bbox_metrics,
    crop_resize,
    decode_peaks,
    encode_heatmaps,
    landmark_errors,
    mask_to_bbox,
    temporal_median,
    transform_box,
)
from .mvol import write_landmarks
from .phantom import Study
from .prep import PrepConfig, intensity_chain, preprocess
from .tensornet import adam_step, masked_l2_loss, softmax_xent_loss
from .views import (
    GeometryError,
    MissingLandmarkError,
    SaxParams,
    plane_2ch,
    plane_3ch,
    plane_4ch,
    render_cine,
    sax_stack,
    write_cine_pgm,
)
from .volume import LandmarkId, LandmarkSet, Series4D, Volume3

log = logging.getLogger(__name__)

TABLE_ROW_ORDER = ("LVA", "MV", "AV", "RVA", "TV", "PV")


@dataclass
class SplitSpec:
    train: list[str]
    val: list[str]
    test: list[str]
    seed: int = 0

    def __post_init__(self):
        buckets = [set(self.train), set(self.val), set(self.test)]
        for i in range(3):
            for j in range(i + 1, 3):
                common = buckets[i] & buckets[j]
                if common:
                    raise ValueError(f"patients in two splits: {sorted(common)}")

    def bucket_of(self, patient_id: str) -> str:
        for name in ("train", "val", "test"):
            if patient_id in getattr(self, name):
                return name
        raise KeyError(f"patient {patient_id} is in no split")

    def to_json(self) -> dict:
        return {"train": self.train, "val": self.val, "test": self.test,
                "seed": self.seed}

    @classmethod
    def from_json(cls, obj: dict) -> "SplitSpec":
        return cls(obj["train"], obj["val"], obj["test"], obj.get("seed", 0))


def split_patients(patient_ids, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> SplitSpec:
    """Deterministic shuffled partition by patient; remainders go to train."""
    ids = sorted(patient_ids)
    if len(ids) < 3:
        raise ValueError("need at least 3 patients to split")
    if len(set(ids)) != len(ids):
        raise ValueError("patient ids must be unique")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    perm = [ids[i] for i in rng.permutation(len(ids))]
    n = len(ids)
    n_val = int(np.floor(fractions[1] * n))
    n_test = int(np.floor(fractions[2] * n))
    n_train = n - n_val - n_test
    return SplitSpec(perm[:n_train], perm[n_train:n_train + n_val],
                     perm[n_train + n_val:], seed)


@dataclass
class TrainConfig:
    epochs_bbox: int = 30
    epochs_landmarks: int = 60
    batch_size: int = 4
    sigma_vox: float = 2.0
    crop_margin: float = 0.0
    bbox_lo: float = 0.05
    bbox_hi: float = 0.95
    ref_frames: tuple[int, ...] = (0,)

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        d["ref_frames"] = list(self.ref_frames)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        if "ref_frames" in obj:
            obj["ref_frames"] = tuple(obj["ref_frames"])
        return cls(**obj)


def _studies_by_bucket(dataset: list[Study], split: SplitSpec, bucket: str):
    wanted = set(getattr(split, bucket))
    found = [st for st in dataset if st.patient_id in wanted]
    if not found:
        raise ValueError(f"{bucket} split matches no studies")
    return found


def _box_label_cube(cube: Volume3, tf, source: Volume3, box: BBox) -> np.ndarray:
    """Voxel labels (1 inside the box) on the preprocessed cube grid."""
    edge = cube.dims[0]
    ax = np.arange(edge, dtype=float)
    spacing = np.asarray(source.spacing)
    origin = np.asarray(source.origin)
    inside = []
    for a in range(3):
        world = tf.matrix[a, a] * ax + tf.translation[a]
        src = np.round((world - origin[a]) / spacing[a])
        inside.append((src >= box.min_idx[a]) & (src <= box.max_idx[a]))
    mask = (inside[0][:, None, None] & inside[1][None, :, None]
            & inside[2][None, None, :])
    return mask.astype(np.int64)


def _prepare_bbox_samples(studies, prep_cfg: PrepConfig):
    xs, ys = [], []
    for st in studies:
        for t in sorted(st.annotations):
            frame = st.series.frames[t]
            cube, tf = preprocess(frame, prep_cfg)
            xs.append(cube.data[None])
            ys.append(_box_label_cube(cube, tf, frame, st.bbox))
    return xs, ys


def _epoch_pass(net, xs, make_target, loss_fn, batch_size, order, train, lr=None):
    total = 0.0
    count = 0
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        x = np.stack([xs[i] for i in idx])
        target = make_target(idx)
        out = net.forward(x, train=train)
        loss, grad = loss_fn(out, target)
        total += loss * len(idx)
        count += len(idx)
        if train:
            net.zero_grads()
            net.backward(grad.astype(net.dtype))
            adam_step(net.params(), lr=lr)
    return total / count


def _snapshot(net):
    return [(p.value.copy(), p.m.copy(), p.v.copy(), p.t) for p in net.params()]


def _restore(net, snap):
    for p, (v, m, vv, t) in zip(net.params(), snap):
        p.value, p.m, p.v, p.t = v, m, vv, t


def train_bbox(dataset: list[Study], cfg: NetConfig, split: SplitSpec,
               prep_cfg: PrepConfig | None = None, train_cfg: TrainConfig | None = None,
               seed: int = 0, ckpt_path=None):
    """Train the 2-class box segmentation network on preprocessed volumes."""
    prep_cfg = prep_cfg or PrepConfig()
    train_cfg = train_cfg or TrainConfig()
    if cfg.out_channels != 2:
        cfg = NetConfig.from_json(dict(cfg.to_json(), out_channels=2))
    xs, ys = _prepare_bbox_samples(_studies_by_bucket(dataset, split, "train"), prep_cfg)
    vxs, vys = _prepare_bbox_samples(_studies_by_bucket(dataset, split, "val"), prep_cfg)

    net = build_net(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    history = []
    best = (np.inf, None)
    for epoch in range(train_cfg.epochs_bbox):
        order = rng.permutation(len(xs))
        tr = _epoch_pass(net, xs, lambda idx: np.stack([ys[i] for i in idx]),
                         softmax_xent_loss, train_cfg.batch_size, order,
                         train=True, lr=cfg.lr)
        va = _epoch_pass(net, vxs, lambda idx: np.stack([vys[i] for i in idx]),
                         softmax_xent_loss, train_cfg.batch_size,
                         np.arange(len(vxs)), train=False)
        history.append({"epoch": epoch, "train_loss": tr, "val_loss": va})
        if va < best[0]:
            best = (va, _snapshot(net))
    if best[1] is not None:
        _restore(net, best[1])
    if ckpt_path is not None:
        net.save(ckpt_path)
    return net, history


def _prepare_landmark_samples(studies, prep_cfg, train_cfg):
    crops, tfs, lms = [], [], []
    for st in studies:
        for t in sorted(st.annotations):
            frame = st.series.frames[t]
            cube, tf = crop_resize(frame, st.bbox, prep_cfg.target_edge,
                                   train_cfg.crop_margin)
            crops.append(cube)
            tfs.append(tf)
            lms.append(st.annotations[t])
    return crops, tfs, lms


def _aug_active(aug: AugConfig) -> bool:
    return (any(aug.flip_enabled) or aug.noise_sigma > 0 or aug.elastic_alpha > 0
            or aug.affine_max_rot > 0 or aug.affine_max_scale > 0
            or aug.affine_max_shift > 0 or aug.brightness_delta > 0
            or aug.contrast_range > 0 or aug.blur_sigma > 0)


def train_landmarks(dataset: list[Study], cfg: NetConfig, split: SplitSpec,
                    prep_cfg: PrepConfig | None = None,
                    train_cfg: TrainConfig | None = None,
                    seed: int = 0, ckpt_path=None):
    """Train the 6-channel heatmap network on ground-truth-box crops."""
    prep_cfg = prep_cfg or PrepConfig()
    train_cfg = train_cfg or TrainConfig()
    if cfg.out_channels != 6:
        cfg = NetConfig.from_json(dict(cfg.to_json(), out_channels=6))
    edge = prep_cfg.target_edge
    sigma = train_cfg.sigma_vox

    crops, tfs, lms_list = _prepare_landmark_samples(
        _studies_by_bucket(dataset, split, "train"), prep_cfg, train_cfg)
    vcrops, vtfs, vlms = _prepare_landmark_samples(
        _studies_by_bucket(dataset, split, "val"), prep_cfg, train_cfg)

    aug_on = _aug_active(cfg.aug)
    if not aug_on:
        xs = [intensity_chain(c, prep_cfg).data[None] for c in crops]
        targets = [encode_heatmaps(l, tf, sigma, edge)
                   for l, tf in zip(lms_list, tfs)]
    vxs = [intensity_chain(c, prep_cfg).data[None] for c in vcrops]
    vtargets = [encode_heatmaps(l, tf, sigma, edge) for l, tf in zip(vlms, vtfs)]

    net = build_net(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    aug_rng = np.random.default_rng(cfg.aug.seed if cfg.aug.seed else seed + 2)

    history = []
    best = (np.inf, None)
    for epoch in range(train_cfg.epochs_landmarks):
        order = rng.permutation(len(crops))
        if aug_on:
            exs, estacks = [], []
            for i in order:
                av, al = augment_sample(crops[i], lms_list[i], cfg.aug, aug_rng)
                exs.append(intensity_chain(av, prep_cfg).data[None])
                estacks.append(encode_heatmaps(al, tfs[i], sigma, edge))
            tr = _epoch_pass(
                net, exs,
                lambda idx: [estacks[i] for i in idx],
                lambda out, st: masked_l2_loss(
                    out, np.stack([h.data for h in st]), np.stack([h.mask for h in st])),
                train_cfg.batch_size, np.arange(len(exs)), train=True, lr=cfg.lr)
        else:
            tr = _epoch_pass(
                net, xs,
                lambda idx: [targets[i] for i in idx],
                lambda out, st: masked_l2_loss(
                    out, np.stack([h.data for h in st]), np.stack([h.mask for h in st])),
                train_cfg.batch_size, order, train=True, lr=cfg.lr)
        va = _epoch_pass(
            net, vxs,
            lambda idx: [vtargets[i] for i in idx],
            lambda out, st: masked_l2_loss(
                out, np.stack([h.data for h in st]), np.stack([h.mask for h in st])),
            train_cfg.batch_size, np.arange(len(vxs)), train=False)
        history.append({"epoch": epoch, "train_loss": tr, "val_loss": va})
        if va < best[0]:
            best = (va, _snapshot(net))
    if best[1] is not None:
        _restore(net, best[1])
    if ckpt_path is not None:
        net.save(ckpt_path)
    return net, history


@dataclass
class InferResult:
    per_frame: list[LandmarkSet]
    median: LandmarkSet
    bbox: BBox
    bbox_fallback: bool
    prob_map: Volume3        # stage-1 foreground probability, cube grid
    prep_transform: object   # cube voxel -> source world transform


def _softmax_fg(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=0, keepdims=True)
    e = np.exp(logits - m)
    return e[1] / e.sum(axis=0)


def infer_study(series: Series4D, bbox_net: ENet3d, lm_net: ENet3d,
                prep_cfg: PrepConfig | None = None,
                train_cfg: TrainConfig | None = None) -> InferResult:
    """Two-stage inference; never reads ground truth."""
    prep_cfg = prep_cfg or PrepConfig()
    train_cfg = train_cfg or TrainConfig()
    edge = prep_cfg.target_edge

    boxes = []
    fallback = False
    prob_vol = None
    prep_tf = None
    for t in train_cfg.ref_frames:
        frame = series.frames[t]
        cube, tf = preprocess(frame, prep_cfg)
        logits = bbox_net.forward(cube.data[None, None], train=False)[0]
        prob = _softmax_fg(logits.astype(np.float64))
        pv = cube.with_data(prob)
        if prob_vol is None:
            prob_vol, prep_tf = pv, tf
        try:
            cube_box = mask_to_bbox(pv, train_cfg.bbox_lo, train_cfg.bbox_hi)
            boxes.append(transform_box(cube_box, tf, frame))
        except EmptyMaskError:
            log.warning("empty bounding-box map on frame %d; using full volume", t)
            fallback = True
            boxes.append(BBox.full(frame.dims))
    box = BBox(
        tuple(min(b.min_idx[a] for b in boxes) for a in range(3)),
        tuple(max(b.max_idx[a] for b in boxes) for a in range(3)),
    )

    crops = []
    tfs = []
    for frame in series.frames:
        cube, ctf = crop_resize(frame, box, edge, train_cfg.crop_margin)
        crops.append(intensity_chain(cube, prep_cfg).data[None])
        tfs.append(ctf)
    per_frame = []
    bs = max(1, train_cfg.batch_size)
    heat = []
    for start in range(0, len(crops), bs):
        out = lm_net.forward(np.stack(crops[start:start + bs]), train=False)
        heat.extend(out)
    for hm, ctf in zip(heat, tfs):
        stack = HeatmapStack(hm, (True,) * 6)
        per_frame.append(decode_peaks(stack, ctf))
    return InferResult(per_frame, temporal_median(per_frame), box, fallback,
                       prob_vol, prep_tf)


def emit_views(series: Series4D, lms: LandmarkSet, out_dir,
               sax_params: SaxParams | None = None,
               resolution: int = 256) -> dict:
    """Write 2/3/4-chamber cines and the SAX stack; per-view errors don't
    block the other views."""
    out_dir = Path(out_dir)
    res = (resolution, resolution)
    results: dict[str, dict] = {}
    p3 = p4 = None

    def attempt(name, fn):
        try:
            plane = fn()
        except (MissingLandmarkError, GeometryError) as e:
            results[name] = {"error": str(e)}
            return None
        frames = render_cine(series, plane)
        write_cine_pgm(frames, out_dir / name, plane)
        results[name] = {"dir": str(out_dir / name), "frames": len(frames)}
        return plane

    p4 = attempt("4ch", lambda: plane_4ch(lms, resolution=res))
    p3 = attempt("3ch", lambda: plane_3ch(lms, resolution=res))

    def make_2ch():
        missing = [l for l in (LandmarkId.MV, LandmarkId.LVA) if l not in lms]
        if missing:
            raise MissingLandmarkError(missing, "2ch")
        if p3 is None or p4 is None:
            raise GeometryError("2ch needs both the 3ch and 4ch planes")
        return plane_2ch(p3, p4, lms, resolution=res)

    attempt("2ch", make_2ch)

    try:
        planes = sax_stack(lms, sax_params, resolution=res)
    except (MissingLandmarkError, GeometryError) as e:
        results["sax"] = {"error": str(e)}
    else:
        slices = []
        for i, plane in enumerate(planes):
            frames = render_cine(series, plane)
            write_cine_pgm(frames, out_dir / "sax" / f"slice_{i:02d}", plane)
            slices.append(str(out_dir / "sax" / f"slice_{i:02d}"))
        results["sax"] = {"slices": slices, "frames": series.frame_count}
    return results


def _median(vals):
    return float(np.median(vals)) if vals else None


def evaluate(dataset: list[Study], split: SplitSpec, bbox_net: ENet3d,
             lm_net: ENet3d, prep_cfg: PrepConfig | None = None,
             train_cfg: TrainConfig | None = None) -> dict:
    """Per-landmark median errors and box metrics per split, Table-1 style."""
    prep_cfg = prep_cfg or PrepConfig()
    train_cfg = train_cfg or TrainConfig()
    report: dict = {"splits": {}}
    for bucket in ("train", "val", "test"):
        studies = _studies_by_bucket(dataset, split, bucket)
        errors: dict[str, list[float]] = {name: [] for name in TABLE_ROW_ORDER}
        box_stats = {"containment_inside": 0, "containment_total": 0,
                     "volume_fraction": [], "dice": [], "pixel_accuracy": []}
        for st in studies:
            result = infer_study(st.series, bbox_net, lm_net, prep_cfg, train_cfg)
            truth_cube_box = transform_box(
                st.bbox, st.series.frames[0].grid_to_world(), result.prob_map)
            anns = sorted(st.annotations.items())
            for t, truth in anns:
                pred = result.per_frame[t]
                for lid, err in landmark_errors(pred, truth).items():
                    errors[lid.value].append(err)
            first_truth = anns[0][1] if anns else LandmarkSet()
            metrics = bbox_metrics(result.prob_map, truth_cube_box, first_truth,
                                   train_cfg.bbox_lo, train_cfg.bbox_hi)
            pred_box = metrics["pred_box"]
            origin = np.asarray(result.prob_map.origin)
            spacing = np.asarray(result.prob_map.spacing)
            for t, truth in anns:
                for _, p in truth.items():
                    box_stats["containment_total"] += 1
                    vox = np.round((p - origin) / spacing)
                    if pred_box.contains_voxel(vox):
                        box_stats["containment_inside"] += 1
            box_stats["volume_fraction"].append(metrics["volume_fraction"])
            box_stats["dice"].append(metrics["dice"])
            box_stats["pixel_accuracy"].append(metrics["pixel_accuracy"])
        per_landmark = {
            name: {"median_mm": _median(errors[name]), "count": len(errors[name])}
            for name in TABLE_ROW_ORDER
        }
        medians = [v["median_mm"] for v in per_landmark.values()
                   if v["median_mm"] is not None]
        pooled = [e for errs in errors.values() for e in errs]
        report["splits"][bucket] = {
            "per_landmark": per_landmark,
            "average_median_mm": float(np.mean(medians)) if medians else None,
            "median_mm": _median(pooled),
            "bbox": {
                "containment_fraction": (
                    box_stats["containment_inside"] / box_stats["containment_total"]
                    if box_stats["containment_total"] else None),
                "volume_fraction": float(np.mean(box_stats["volume_fraction"])),
                "dice": float(np.mean(box_stats["dice"])),
                "pixel_accuracy": float(np.mean(box_stats["pixel_accuracy"])),
            },
            "raw_errors": errors,
        }
    return report


def report_to_csv(report: dict) -> str:
    """Table-1-shaped CSV: one row per landmark plus the two aggregate rows."""
    cols = ["landmark"]
    for bucket in ("train", "val", "test"):
        cols += [f"{bucket}_median_mm", f"{bucket}_count"]
    lines = [",".join(cols)]

    def fmt(x):
        return "" if x is None else (f"{x:.3f}" if isinstance(x, float) else str(x))

    for name in TABLE_ROW_ORDER:
        row = [name]
        for bucket in ("train", "val", "test"):
            cell = report["splits"][bucket]["per_landmark"][name]
            row += [fmt(cell["median_mm"]), fmt(cell["count"])]
        lines.append(",".join(row))
    for label, key in (("Average Median Error", "average_median_mm"),
                       ("Median Error", "median_mm")):
        row = [label]
        for bucket in ("train", "val", "test"):
            row += [fmt(report["splits"][bucket][key]), ""]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


@dataclass
class SearchSpec:
    """Random-search protocol: train n_trials short runs, re-train the best
    few longer, pick by validation median landmark error."""

    n_trials: int = 50
    trial_epochs: int = 40
    finalists: int = 3
    finalist_epochs: int = 100
    seed: int = 0
    batch_size: int = 4
    # architecture ranges (inclusive)
    initial_filters: tuple[int, int] = (4, 16)
    asym_kernel: tuple[int, int] = (3, 7)
    n_stage1_bottlenecks: tuple[int, int] = (1, 4)
    n_stage2_repeats: tuple[int, int] = (1, 2)
    pool_kinds: tuple[str, ...] = ("max", "avg")
    projection_scale: tuple[int, int] = (1, 4)
    dropout: tuple[float, float] = (0.0, 0.3)
    lr: tuple[float, float] = (3e-4, 3e-3)
    # distortion ranges
    noise_sigma: tuple[float, float] = (0.0, 0.2)
    elastic_alpha: tuple[float, float] = (0.0, 2.0)
    elastic_sigma: float = 4.0
    affine_max_rot: tuple[float, float] = (0.0, 0.25)
    affine_max_scale: tuple[float, float] = (0.0, 0.15)
    affine_max_shift: tuple[float, float] = (0.0, 3.0)
    brightness_delta: tuple[float, float] = (0.0, 0.3)
    contrast_range: tuple[float, float] = (0.0, 0.3)
    blur_sigma: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if not (self.n_trials >= self.finalists >= 1):
            raise ValueError("need n_trials >= finalists >= 1")

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "SearchSpec":
        obj = dict(obj)
        for k, v in obj.items():
            if isinstance(v, list):
                obj[k] = tuple(v)
        return cls(**obj)


def sample_config(spec: SearchSpec, rng: np.random.Generator) -> NetConfig:
    """Draw one trial configuration uniformly from the search ranges."""
    f = int(rng.integers(spec.initial_filters[0], spec.initial_filters[1] + 1))
    f = max(2, f)
    odd = [k for k in range(spec.asym_kernel[0], spec.asym_kernel[1] + 1)
           if k % 2 == 1 and k >= 3]
    divisors = [d for d in range(spec.projection_scale[0],
                                 spec.projection_scale[1] + 1)
                if d >= 1 and f % d == 0]
    aug = AugConfig(
        flip_enabled=tuple(bool(rng.integers(0, 2)) for _ in range(3)),
        noise_sigma=float(rng.uniform(*spec.noise_sigma)),
        elastic_alpha=float(rng.uniform(*spec.elastic_alpha)),
        elastic_sigma=spec.elastic_sigma,
        affine_max_rot=float(rng.uniform(*spec.affine_max_rot)),
        affine_max_scale=float(rng.uniform(*spec.affine_max_scale)),
        affine_max_shift=float(rng.uniform(*spec.affine_max_shift)),
        brightness_delta=float(rng.uniform(*spec.brightness_delta)),
        contrast_range=float(rng.uniform(*spec.contrast_range)),
        blur_sigma=float(rng.uniform(*spec.blur_sigma)),
        seed=int(rng.integers(0, 2**31 - 1)),
    )
    return NetConfig(
        initial_filters=f,
        asym_kernel=int(rng.choice(odd)),
        n_stage1_bottlenecks=int(rng.integers(spec.n_stage1_bottlenecks[0],
                                              spec.n_stage1_bottlenecks[1] + 1)),
        n_stage2_repeats=int(rng.integers(spec.n_stage2_repeats[0],
                                          spec.n_stage2_repeats[1] + 1)),
        pool_kind=str(rng.choice(list(spec.pool_kinds))),
        projection_scale=int(rng.choice(divisors)) if divisors else 1,
        dropout=float(rng.uniform(*spec.dropout)),
        lr=float(np.exp(rng.uniform(np.log(spec.lr[0]), np.log(spec.lr[1])))),
        out_channels=6,
        aug=aug,
    )


def _val_median_error(dataset, split, net, prep_cfg, train_cfg):
    """Median landmark error over validation crops (ground-truth boxes)."""
    edge = prep_cfg.target_edge
    errs = []
    for st in _studies_by_bucket(dataset, split, "val"):
        for t, truth in sorted(st.annotations.items()):
            frame = st.series.frames[t]
            cube, tf = crop_resize(frame, st.bbox, edge, train_cfg.crop_margin)
            x = intensity_chain(cube, prep_cfg).data[None, None]
            out = net.forward(x, train=False)[0]
            pred = decode_peaks(HeatmapStack(out, (True,) * 6), tf)
            errs.extend(landmark_errors(pred, truth).values())
    return _median(errs)


def hyperparam_search(dataset: list[Study], spec: SearchSpec, split: SplitSpec,
                      prep_cfg: PrepConfig | None = None,
                      train_cfg: TrainConfig | None = None) -> tuple[NetConfig, dict]:
    """Random search: rank short runs by validation l2, re-train the best,
    select by validation median landmark error."""
    prep_cfg = prep_cfg or PrepConfig()
    base_train = train_cfg or TrainConfig()
    rng = np.random.default_rng(spec.seed)
    configs = [sample_config(spec, rng) for _ in range(spec.n_trials)]
    trial_seeds = [int(s) for s in rng.integers(0, 2**31 - 1, spec.n_trials)]
    finalist_seeds = [int(s) for s in rng.integers(0, 2**31 - 1, spec.finalists)]

    def with_epochs(n):
        cfg = TrainConfig.from_json(base_train.to_json())
        cfg.epochs_landmarks = n
        cfg.batch_size = spec.batch_size
        return cfg

    trials = []
    for i, cfg in enumerate(configs):
        _, history = train_landmarks(dataset, cfg, split, prep_cfg,
                                     with_epochs(spec.trial_epochs),
                                     seed=trial_seeds[i])
        best_val = min(h["val_loss"] for h in history)
        trials.append({"trial": i, "config": cfg.to_json(), "val_l2": best_val})
    ranked = sorted(trials, key=lambda r: r["val_l2"])
    for rank, row in enumerate(ranked):
        row["rank"] = rank

    finalists = []
    for j, row in enumerate(ranked[: spec.finalists]):
        cfg = NetConfig.from_json(row["config"])
        net, history = train_landmarks(dataset, cfg, split, prep_cfg,
                                       with_epochs(spec.finalist_epochs),
                                       seed=finalist_seeds[j])
        med = _val_median_error(dataset, split, net, prep_cfg, base_train)
        finalists.append({
            "trial": row["trial"],
            "config": row["config"],
            "val_l2": min(h["val_loss"] for h in history),
            "val_median_mm": med,
        })
    finalists.sort(key=lambda r: r["val_median_mm"])
    best_cfg = NetConfig.from_json(finalists[0]["config"])
    report = {
        "protocol": {"n_trials": spec.n_trials, "trial_epochs": spec.trial_epochs,
                     "finalists": spec.finalists,
                     "finalist_epochs": spec.finalist_epochs, "seed": spec.seed},
        "trials": ranked,
        "finalists": finalists,
        "best": best_cfg.to_json(),
    }
    return best_cfg, report


def write_json_atomic(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True))
    os.replace(tmp, path)
    return path


def write_text_atomic(text: str, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
    return path


def write_inference(result: InferResult, out_dir, patient_id: str) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_landmarks({t: lms for t, lms in enumerate(result.per_frame)},
                    out_dir / f"{patient_id}.per_frame.json")
    write_landmarks({0: result.median}, out_dir / f"{patient_id}.median.json")
    write_json_atomic({
        "patient": patient_id,
        "bbox": result.bbox.to_json(),
        "bbox_fallback": result.bbox_fallback,
    }, out_dir / f"{patient_id}.bbox.json")
