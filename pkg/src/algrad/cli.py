"""Command-line entry point: run, validate, report, gen-data, prepare-mnist."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .experiment import load_dataset, run_experiment
from .pool import make_blobs, write_dataset_csv
from .report import write_report

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

_BLOB_KEYS = {"kind", "n_per_class", "num_classes", "dim", "spread", "class_ratios", "seed", "output_dir"}


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.output_dir:
        cfg.output_dir = str(Path(args.output_dir).resolve())
    if args.trials is not None:
        cfg.trials = args.trials
        cfg.validate()
    result = run_experiment(cfg)
    for row in result.summary:
        print(f"round {row['round']}  labeled {row['labeled_count']}  "
              f"accuracy {row['mean_accuracy']:.4f} ± {row['std_accuracy']:.4f}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    cfg = load_config(args.config)
    if args.with_data:
        cfg.validate(train_size=len(load_dataset(cfg).train_indices))
    print(f"{args.config}: ok")
    return EXIT_OK


def _cmd_report(args) -> int:
    path, table = write_report(args.results_dir, args.output)
    print(table)
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_gen_data(args) -> int:
    spec_path = Path(args.spec)
    try:
        spec = json.loads(spec_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from None
    unknown = sorted(set(spec) - _BLOB_KEYS)
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    if spec.get("kind", "blobs") != "blobs":
        raise ConfigError("kind", "only 'blobs' datasets can be generated")
    out = Path(args.output_dir or spec.get("output_dir") or spec_path.parent)
    if not out.is_absolute() and not args.output_dir:
        out = spec_path.parent / out
    try:
        ds = make_blobs(spec.get("n_per_class", 100), spec.get("num_classes", 3), spec.get("dim", 2),
                        spec.get("spread", 1.0), np.random.default_rng(spec.get("seed", 0)),
                        spec.get("class_ratios"))
    except ValueError as exc:
        raise ConfigError("gen-data", str(exc)) from None
    out.mkdir(parents=True, exist_ok=True)
    write_dataset_csv(ds, out / "train.csv", out / "test.csv")
    print(f"wrote {out / 'train.csv'} and {out / 'test.csv'}")
    return EXIT_OK


def _cmd_prepare_mnist(args) -> int:
    from .mnist import prepare_mnist_subset
    out = prepare_mnist_subset(args.output_dir)
    print(f"wrote MNIST subset IDX files to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="algrad", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute an experiment and write its outputs")
    p.add_argument("config")
    p.add_argument("--output-dir")
    p.add_argument("--trials", type=int)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("validate", help="check a config without running it")
    p.add_argument("config")
    p.add_argument("--with-data", action="store_true", help="also load the dataset and check budgets")
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("report", help="merge trial CSVs into a mean ± std table")
    p.add_argument("results_dir")
    p.add_argument("-o", "--output")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("gen-data", help="write synthetic blobs as train/test CSV files")
    p.add_argument("spec")
    p.add_argument("-o", "--output-dir")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("prepare-mnist", help="build the local MNIST subset IDX files")
    p.add_argument("output_dir", nargs="?", default="data/mnist")
    p.set_defaults(func=_cmd_prepare_mnist)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
