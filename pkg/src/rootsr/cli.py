"""Command-line interface: dataset generation, training, inference,
evaluation, and slice export.

Exit codes: 0 success, 1 usage error, 2 data/config error. Diagnostics go
to stderr; machine-readable outputs go to files only. Every command that
owns an output directory writes effective-config.json there, echoing all
resolved defaults; re-running with that file reproduces the outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import metrics, synth
from .infer import segment_volume
from .net import NetConfig, load_checkpoint
from .train import train as run_training
from .train import train_config_from_dict, train_config_to_dict
from .volume import Volume, export_slice, read_rvol, write_rvol


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _net_config_from_dict(d: dict) -> NetConfig:
    kwargs = synth._check_keys(dict(d), NetConfig, "net")
    return NetConfig(**kwargs)


def _net_config_to_dict(cfg: NetConfig) -> dict:
    return dataclasses.asdict(cfg)


_EVAL_KEYS = {"tolerances", "threshold"}


def load_run_config(path) -> dict:
    """Parse and validate the JSON run config; returns materialized sections
    {"gen": DatasetConfig, "net": NetConfig, "train": TrainConfig, "eval": {...}}."""
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if not isinstance(doc, dict):
        raise ValueError("config root must be a JSON object")
    unknown = set(doc) - {"gen", "net", "train", "eval"}
    if unknown:
        raise ValueError(f"unknown config section(s): {sorted(unknown)}")
    ev = dict(doc.get("eval", {}))
    bad = set(ev) - _EVAL_KEYS
    if bad:
        raise ValueError(f"unknown config key eval.{sorted(bad)[0]}")
    return {
        "gen": synth.dataset_config_from_dict(doc.get("gen", {})),
        "net": _net_config_from_dict(doc.get("net", {})),
        "train": train_config_from_dict(doc.get("train", {})),
        "eval": {
            "tolerances": list(ev.get("tolerances", [0, 1, 2, 3, 4, 5])),
            "threshold": float(ev.get("threshold", 0.5)),
        },
    }


def effective_config_dict(cfg: dict) -> dict:
    return {
        "gen": synth.dataset_config_to_dict(cfg["gen"]),
        "net": _net_config_to_dict(cfg["net"]),
        "train": train_config_to_dict(cfg["train"]),
        "eval": cfg["eval"],
    }


def write_effective_config(cfg: dict, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    blob = json.dumps(effective_config_dict(cfg), sort_keys=True, indent=2)
    with open(os.path.join(out_dir, "effective-config.json"), "w", encoding="utf-8") as f:
        f.write(blob + "\n")


def _parse_tolerances(text: str):
    try:
        vals = [float(t) for t in text.split(",") if t != ""]
    except ValueError:
        raise ValueError(f"bad tolerance list {text!r}")
    if not vals or any(v < 0 for v in vals):
        raise ValueError(f"tolerances must be non-negative: {text!r}")
    return vals


def _build_parser() -> _Parser:
    p = _Parser(prog="rootsr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--workers", type=int, default=1)

    t = sub.add_parser("train", help="train on a generated dataset")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--workers", type=int, default=1)

    i = sub.add_parser("infer", help="segment a volume at 2x resolution")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--threshold", type=float, default=0.5)
    i.add_argument("--tile", type=int, default=60)

    e = sub.add_parser("eval", help="distance-tolerant scores for a segmentation")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--dontcare", default=None)
    e.add_argument("--tolerances", default="0,1,2,3,4,5")
    e.add_argument("--csv", required=True)
    e.add_argument("--confusion", default=None, help="directory for confusion slices")
    e.add_argument("--confusion-tolerance", type=float, default=1.0)
    e.add_argument("--axis", default="d", choices=["d", "h", "w", "z", "y", "x"])

    s = sub.add_parser("slices", help="export grayscale slices of a volume")
    s.add_argument("--input", required=True)
    s.add_argument("--axis", default="z", choices=["d", "h", "w", "z", "y", "x"])
    s.add_argument("--out", required=True)
    return p


_AXIS_ALIAS = {"z": "d", "y": "h", "x": "w", "d": "d", "h": "h", "w": "w"}


def _require_binary(vol: Volume, name: str) -> None:
    vals = np.unique(vol.data)
    if not np.isin(vals, (0, 1)).all():
        raise ValueError(f"{name} must be a binary volume (values 0/1)")


def _cmd_gen(args) -> int:
    cfg = load_run_config(args.config)
    if args.workers < 1:
        raise ValueError("--workers must be >= 1")
    write_effective_config(cfg, args.out)
    synth.generate_dataset(cfg["gen"], args.out, workers=args.workers)
    print(f"wrote dataset to {args.out}", file=sys.stderr)
    return 0


def _cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.workers < 1:
        raise ValueError("--workers must be >= 1")
    # training itself is single-threaded for determinism; --workers is
    # accepted for interface parity with gen
    write_effective_config(cfg, args.out)
    run_training(cfg["train"], args.data, args.out, net_cfg=cfg["net"])
    print(f"wrote checkpoints and logs to {args.out}", file=sys.stderr)
    return 0


def _cmd_infer(args) -> int:
    net = load_checkpoint(args.ckpt)
    vol = read_rvol(args.input)
    prob, seg = segment_volume(net, vol, threshold=args.threshold, tile=args.tile)
    os.makedirs(args.out, exist_ok=True)
    write_rvol(prob, os.path.join(args.out, "prob.rvol"))
    write_rvol(seg, os.path.join(args.out, "seg.rvol"))
    with open(os.path.join(args.out, "effective-config.json"), "w", encoding="utf-8") as f:
        json.dump(
            {"ckpt": args.ckpt, "input": args.input, "threshold": args.threshold,
             "tile": args.tile},
            f, sort_keys=True, indent=2)
        f.write("\n")
    print(f"wrote prob.rvol and seg.rvol to {args.out}", file=sys.stderr)
    return 0


def _cmd_eval(args) -> int:
    pred = read_rvol(args.pred)
    gt = read_rvol(args.gt)
    _require_binary(pred, "--pred")
    _require_binary(gt, "--gt")
    dontcare = None
    if args.dontcare:
        dontcare = read_rvol(args.dontcare)
        _require_binary(dontcare, "--dontcare")
    tolerances = _parse_tolerances(args.tolerances)
    report = metrics.distance_tolerant_prf(pred, gt, tolerances, dontcare=dontcare)
    metrics.write_report_csv(report, args.csv)
    if args.confusion:
        cv = metrics.confusion_map(pred, gt, args.confusion_tolerance, dontcare=dontcare)
        metrics.export_confusion_slices(cv, _AXIS_ALIAS[args.axis], args.confusion)
    print(f"wrote {args.csv}", file=sys.stderr)
    return 0


def _cmd_slices(args) -> int:
    vol = read_rvol(args.input)
    axis = _AXIS_ALIAS[args.axis]
    os.makedirs(args.out, exist_ok=True)
    n = vol.shape[{"d": 1, "h": 2, "w": 3}[axis]]
    for i in range(n):
        export_slice(vol, axis, i, os.path.join(args.out, f"{axis}{i:04d}.pgm"))
    print(f"wrote {n} slices to {args.out}", file=sys.stderr)
    return 0


_COMMANDS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "slices": _cmd_slices,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError, KeyError, json.JSONDecodeError) as e:
        print(f"rootsr {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
