"""Command-line entry point: ``pointnuc <command> ...``.

Exit codes: 0 success, 1 invalid input (config, dataset, checkpoint, arguments),
2 training aborted at runtime.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import DatasetError, PlacementError, generate_dataset_dir, split_counts
from .harness import ablation, plots
from .harness.config import ConfigError, TrainConfig
from .harness.train import CheckpointError, TrainingAborted, evaluate, train

EXIT_OK, EXIT_INVALID, EXIT_ABORTED = 0, 1, 2


def _pair(kind):
    def parse(text):
        parts = text.replace("x", ",").split(",")
        if len(parts) == 1:
            parts = parts * 2
        if len(parts) != 2:
            raise argparse.ArgumentTypeError(f"expected A or A,B, got {text!r}")
        return tuple(kind(p) for p in parts)

    return parse


def _ratio(text):
    try:
        parts = tuple(int(p) for p in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected A:B:C, got {text!r}") from None
    if len(parts) != 3 or min(parts) < 0 or parts[0] < 1:
        raise argparse.ArgumentTypeError(f"expected A:B:C with A >= 1, got {text!r}")
    return parts


def cmd_generate(args) -> int:
    counts = split_counts(args.n, args.split)
    manifests = generate_dataset_dir(
        args.out, counts, seed=args.seed, image_size=args.size, nuclei_per_image=args.nuclei,
        radius_range=args.radius, texture_noise=args.noise,
    )
    print(json.dumps({name: len(m.samples) for name, m in manifests.items()}))
    return EXIT_OK


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if getattr(args, "data", None):
        cfg = cfg.replace(data_dir=args.data)
    return cfg


def cmd_train(args) -> int:
    result = train(_load_config(args), args.out)
    print(json.dumps({
        "best_checkpoint": str(result.best_checkpoint),
        "last_checkpoint": str(result.last_checkpoint),
        "log": str(result.log_path),
        "seconds": round(result.seconds, 1),
    }))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    report = evaluate(args.checkpoint, args.split, data_dir=args.data, oracle=args.oracle)
    if args.out:
        report.write(args.out)
    print(json.dumps(report.summary(), sort_keys=True))
    return EXIT_OK


def cmd_ablate(args) -> int:
    result = ablation.ablate_blocks(_load_config(args), args.out, seeds=args.seeds, split=args.split)
    table = {ablation.variant_label(v): row for v, row in result.table().items()}
    print(json.dumps({"mean": table, "dynamic_pq_margin": result.dynamic_margin()}, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_plot(args) -> int:
    for path in plots.plot_run(args.log, args.out):
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pointnuc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic dataset split 3:1:1 by default")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True, help="total number of images")
    p.add_argument("--size", type=_pair(int), default=(128, 128), help="S or H,W")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", type=_ratio, default=(3, 1, 1), help="train:val:test ratio")
    p.add_argument("--nuclei", type=_pair(int), default=(8, 15), help="min,max nuclei per image")
    p.add_argument("--radius", type=_pair(float), default=(4.0, 9.0), help="min,max semi-axis")
    p.add_argument("--noise", type=float, default=0.1)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train from a key = value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="override data_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", help="report path (.json, plus a sibling .csv)")
    p.add_argument("--data", help="override the checkpoint's data_dir")
    p.add_argument("--oracle", action="store_true", help="score ground truth against itself")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate-blocks", help="fixed blocks 1-4 vs dynamic selection")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="ablate-blocks")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.add_argument("--data", help="override data_dir")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="figures from a run or ablation directory")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingAborted as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    except (ConfigError, DatasetError, PlacementError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
