"""Command line interface.

Subcommands: ``phantom gen``, ``split``, ``train-bbox``,
``train-landmarks``, ``search``, ``infer``, ``views``, ``eval``. All
take ``--config <json>`` (one file with optional ``prep``, ``net``,
``train``, ``phantom``, ``search`` sections), ``--seed`` and ``--out``.
``--desk`` shrinks the protocol to desk scale (search 3/2/1/4, training
2 epochs). Exit code is 0 on success; failures print a one-line JSON
error object to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .enet3d import ENet3d, NetConfig
from .mvol import read_landmarks, read_mvol
from .phantom import PhantomParams, load_dataset, phantom_dataset, write_dataset
from .pipeline import (
    SearchSpec,
    SplitSpec,
    TrainConfig,
    evaluate,
    hyperparam_search,
    infer_study,
    emit_views,
    report_to_csv,
    split_patients,
    train_bbox,
    train_landmarks,
    write_inference,
    write_json_atomic,
    write_text_atomic,
)
from .prep import PrepConfig
from .views import SaxParams


def _load_config(path):
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _section(cfg: dict, name: str, cls, **overrides):
    obj = dict(cfg.get(name, {}))
    obj.update(overrides)
    return cls.from_json(obj) if hasattr(cls, "from_json") else cls(**obj)


def _desk_train(train_cfg: TrainConfig) -> TrainConfig:
    obj = train_cfg.to_json()
    obj["epochs_bbox"] = 2
    obj["epochs_landmarks"] = 2
    return TrainConfig.from_json(obj)


def _desk_search(spec: SearchSpec) -> SearchSpec:
    obj = spec.to_json()
    obj.update(n_trials=3, trial_epochs=2, finalists=1, finalist_epochs=4)
    return SearchSpec.from_json(obj)


def cmd_phantom_gen(args):
    cfg = _load_config(args.config)
    params = _section(cfg, "phantom", PhantomParams, seed=args.seed)
    studies = phantom_dataset(args.n, params, args.seed, args.drop)
    write_dataset(studies, args.out, extra={"seed": args.seed,
                                            "params": params.to_json()})
    print(json.dumps({"out": str(args.out), "patients": len(studies)}))


def cmd_split(args):
    studies = load_dataset(args.data)
    fractions = tuple(float(f) for f in args.fractions.split(","))
    spec = split_patients([s.patient_id for s in studies], fractions, args.seed)
    out = Path(args.out)
    if out.is_dir() or not out.suffix:
        out = out / "split.json" if not out.suffix else out
    write_json_atomic(spec.to_json(), out)
    print(json.dumps({"out": str(out), "train": len(spec.train),
                      "val": len(spec.val), "test": len(spec.test)}))


def _load_split(path) -> SplitSpec:
    return SplitSpec.from_json(json.loads(Path(path).read_text()))


def cmd_train_bbox(args):
    cfg = _load_config(args.config)
    prep = _section(cfg, "prep", PrepConfig)
    net_cfg = _section(cfg, "net", NetConfig, out_channels=2)
    train_cfg = _section(cfg, "train", TrainConfig)
    if args.desk:
        train_cfg = _desk_train(train_cfg)
    dataset = load_dataset(args.data)
    split = _load_split(args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net, history = train_bbox(dataset, net_cfg, split, prep, train_cfg,
                              seed=args.seed, ckpt_path=out / "bbox.ckpt")
    write_json_atomic(history, out / "bbox.history.json")
    print(json.dumps({"ckpt": str(out / "bbox.ckpt"),
                      "final_val_loss": history[-1]["val_loss"]}))


def cmd_train_landmarks(args):
    cfg = _load_config(args.config)
    prep = _section(cfg, "prep", PrepConfig)
    net_cfg = _section(cfg, "net", NetConfig, out_channels=6)
    train_cfg = _section(cfg, "train", TrainConfig)
    if args.desk:
        train_cfg = _desk_train(train_cfg)
    dataset = load_dataset(args.data)
    split = _load_split(args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net, history = train_landmarks(dataset, net_cfg, split, prep, train_cfg,
                                   seed=args.seed,
                                   ckpt_path=out / "landmarks.ckpt")
    write_json_atomic(history, out / "landmarks.history.json")
    print(json.dumps({"ckpt": str(out / "landmarks.ckpt"),
                      "final_val_loss": history[-1]["val_loss"]}))


def cmd_search(args):
    cfg = _load_config(args.config)
    prep = _section(cfg, "prep", PrepConfig)
    spec = _section(cfg, "search", SearchSpec, seed=args.seed)
    train_cfg = _section(cfg, "train", TrainConfig)
    if args.desk:
        spec = _desk_search(spec)
    dataset = load_dataset(args.data)
    split = _load_split(args.split)
    best, report = hyperparam_search(dataset, spec, split, prep, train_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json_atomic(report, out / "search.json")
    write_json_atomic(best.to_json(), out / "best_config.json")
    print(json.dumps({"report": str(out / "search.json"),
                      "best_val_median_mm": report["finalists"][0]["val_median_mm"]}))


def cmd_infer(args):
    cfg = _load_config(args.config)
    prep = _section(cfg, "prep", PrepConfig)
    train_cfg = _section(cfg, "train", TrainConfig)
    bbox_net = ENet3d.load(args.bbox_ckpt)
    lm_net = ENet3d.load(args.lm_ckpt)
    out = Path(args.out)
    if args.study:
        series = read_mvol(args.study)
        result = infer_study(series, bbox_net, lm_net, prep, train_cfg)
        write_inference(result, out, Path(args.study).stem)
        print(json.dumps({"out": str(out), "frames": len(result.per_frame),
                          "bbox_fallback": result.bbox_fallback}))
        return
    dataset = load_dataset(args.data)
    summary = []
    for st in dataset:
        result = infer_study(st.series, bbox_net, lm_net, prep, train_cfg)
        write_inference(result, out, st.patient_id)
        summary.append({"patient": st.patient_id,
                        "bbox_fallback": result.bbox_fallback})
    write_json_atomic(summary, out / "inference.json")
    print(json.dumps({"out": str(out), "patients": len(summary)}))


def cmd_views(args):
    series = read_mvol(args.study)
    ann = read_landmarks(args.landmarks)
    frame = sorted(ann)[0] if args.frame is None else args.frame
    lms = ann[frame]
    sax = SaxParams(n_slices=args.sax_slices)
    results = emit_views(series, lms, args.out, sax, resolution=args.resolution)
    print(json.dumps(results, sort_keys=True))
    errors = [k for k, v in results.items() if "error" in v]
    if len(errors) == len(results):
        raise SystemExit(1)


def cmd_eval(args):
    cfg = _load_config(args.config)
    prep = _section(cfg, "prep", PrepConfig)
    train_cfg = _section(cfg, "train", TrainConfig)
    dataset = load_dataset(args.data)
    split = _load_split(args.split)
    bbox_net = ENet3d.load(args.bbox_ckpt)
    lm_net = ENet3d.load(args.lm_ckpt)
    report = evaluate(dataset, split, bbox_net, lm_net, prep, train_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json_atomic(report, out / "report.json")
    write_text_atomic(report_to_csv(report), out / "table.csv")
    print(json.dumps({
        "report": str(out / "report.json"),
        "test_median_mm": report["splits"]["test"]["median_mm"],
        "test_containment": report["splits"]["test"]["bbox"]["containment_fraction"],
    }))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cardioviews",
        description="Cardiac landmark localization and view computation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--desk", action="store_true",
                       help="desk-scale preset (tiny protocol numbers)")

    phantom = sub.add_parser("phantom", help="synthetic data").add_subparsers(
        dest="phantom_command", required=True)
    gen = phantom.add_parser("gen", help="generate a phantom dataset")
    common(gen)
    gen.add_argument("--n", type=int, default=10, help="number of patients")
    gen.add_argument("--drop", type=float, default=0.0,
                     help="fraction of landmark annotations to drop")
    gen.set_defaults(func=cmd_phantom_gen)

    split = sub.add_parser("split", help="patient-level train/val/test split")
    common(split)
    split.add_argument("--data", required=True)
    split.add_argument("--fractions", default="0.8,0.1,0.1")
    split.set_defaults(func=cmd_split)

    for name, fn in (("train-bbox", cmd_train_bbox),
                     ("train-landmarks", cmd_train_landmarks)):
        p = sub.add_parser(name, help=f"{name.replace('-', ' ')} network")
        common(p)
        p.add_argument("--data", required=True)
        p.add_argument("--split", required=True)
        p.set_defaults(func=fn)

    search = sub.add_parser("search", help="hyperparameter search protocol")
    common(search)
    search.add_argument("--data", required=True)
    search.add_argument("--split", required=True)
    search.set_defaults(func=cmd_search)

    infer = sub.add_parser("infer", help="two-stage landmark inference")
    common(infer)
    infer.add_argument("--data", help="dataset directory")
    infer.add_argument("--study", help="single MVOL study")
    infer.add_argument("--bbox-ckpt", required=True)
    infer.add_argument("--lm-ckpt", required=True)
    infer.set_defaults(func=cmd_infer)

    views = sub.add_parser("views", help="render 2/3/4ch and SAX cines")
    common(views)
    views.add_argument("--study", required=True)
    views.add_argument("--landmarks", required=True,
                       help="landmark JSON (e.g. a median prediction)")
    views.add_argument("--frame", type=int, default=None,
                       help="annotation frame to use (default: first)")
    views.add_argument("--sax-slices", type=int, default=6)
    views.add_argument("--resolution", type=int, default=256)
    views.set_defaults(func=cmd_views)

    ev = sub.add_parser("eval", help="Table-1-style evaluation report")
    common(ev)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", required=True)
    ev.add_argument("--bbox-ckpt", required=True)
    ev.add_argument("--lm-ckpt", required=True)
    ev.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "infer" and not (args.data or args.study):
        parser.error("infer needs --data or --study")
    try:
        args.func(args)
    except SystemExit as e:
        return int(e.code or 0)
    except Exception as e:  # structured failure for scripting
        print(json.dumps({"error": f"{type(e).__name__}: {e}"}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
