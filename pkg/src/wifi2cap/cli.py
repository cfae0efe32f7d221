"""Command-line entry point: synth | train | eval | ablate | viz."""

from __future__ import annotations

import argparse
import sys

from wifi2cap import pipeline
from wifi2cap.config import MIRROR_MODES, load_config


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML config file (defaults apply otherwise)")
    parser.add_argument("--seed", type=int, help="override the root seed")
    parser.add_argument("--out", help="override the output directory")


def _build_config(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if getattr(args, "stages", None):
        overrides["stages"] = tuple(s.strip() for s in args.stages.split(","))
    if getattr(args, "mirror", None):
        overrides["mirror"] = args.mirror
    if getattr(args, "baseline", False):
        overrides["baseline"] = True
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="wifi2cap",
        description="CSI-to-caption pipeline: synthesize data, train stages, evaluate",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic corpus")
    _common(p)
    p.add_argument("--classes", type=int, help="number of action classes")
    p.add_argument("--per-class", type=int, help="clips per class")

    p = sub.add_parser("train", help="run training stages")
    _common(p)
    p.add_argument("--stages", help="comma list from s1,s2_1,s2_2,s3 (default: all)")
    p.add_argument("--mirror", choices=MIRROR_MODES, help="mirror-consistency arm")
    p.add_argument("--baseline", action="store_true",
                   help="allow s3 over an untrained CSI encoder")

    p = sub.add_parser("eval", help="generate captions on a split and score them")
    _common(p)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))

    p = sub.add_parser("ablate", help="run the stage/mirror ablation grid")
    _common(p)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))

    p = sub.add_parser("viz", help="export the CSI-text similarity heatmap")
    _common(p)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))

    args = parser.parse_args(argv)
    cfg = _build_config(args)

    if args.command == "synth":
        if args.classes is not None:
            cfg.data.classes = args.classes
        if args.per_class is not None:
            cfg.data.clips_per_class = args.per_class
        cfg.validate()
        ds = pipeline.cmd_synth(cfg)
        print(f"dataset: {len(ds)} clips at {ds.root}")
    elif args.command == "train":
        artifacts = pipeline.cmd_train(cfg)
        for name, path in artifacts.items():
            print(f"{name}: {path}")
    elif args.command == "eval":
        report = pipeline.cmd_eval(cfg, split=args.split)
        for k, v in report.scores.items():
            print(f"{k}: {v:.2f}")
        print(f"retrieval_top1: {report.retrieval_top1:.3f}")
        if report.direction_accuracy is not None:
            print(f"direction_accuracy: {report.direction_accuracy:.3f}")
    elif args.command == "ablate":
        csv_path, rows = pipeline.cmd_ablate(cfg, split=args.split)
        print(f"table: {csv_path}")
        for row in rows:
            print(f"{row['arm']:>16}  bleu4={row['bleu4'] or '-':>7}  "
                  f"dir={row['direction_acc'] or '-':>6}  {row['status']}")
    elif args.command == "viz":
        csv_path, png_path = pipeline.cmd_viz(cfg, split=args.split)
        print(f"wrote {csv_path} and {png_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
