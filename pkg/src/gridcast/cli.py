"""Command line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 method failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .harness import ConfigError, DataError, ExperimentConfig, run
from .ingest import SyntheticConfig, dataset_stats, generate_synthetic, write_csv

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_METHOD = 0, 2, 3, 4


def _cmd_run(args) -> int:
    try:
        config = ExperimentConfig.from_file(args.config)
        if args.unified_eval:
            config.set("run", "unified_eval", True)
        if args.parallel_methods:
            config.set("run", "parallel_methods", True)
        if args.out:
            config.set("run", "output_dir", str(Path(args.out).resolve()))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        report = run(config)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(f"report written to {config.output_dir / 'report.json'}")
    _print_summary(json.loads(report.to_json()))
    if report.failed:
        print(f"failed methods: {', '.join(report.failed)}", file=sys.stderr)
        return EXIT_METHOD
    return EXIT_OK


def _cmd_synth(args) -> int:
    try:
        cfg = SyntheticConfig(seed=args.seed, days=args.days)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    ds = generate_synthetic(cfg)
    paths = write_csv(ds, args.out)
    stats = dataset_stats(ds)
    print(f"wrote {len(paths)} streams to {args.out}")
    print(f"rt_price mean {stats['mean']:.2f}  sd {stats['sd']:.2f}  max {stats['max']:.2f}")
    return EXIT_OK


def _print_summary(report: dict) -> None:
    ds = report["provenance"]["dataset"]
    print(f"dataset {ds['start']} .. {ds['end']}: mean {ds['mean']:.2f}  sd {ds['sd']:.2f}  "
          f"max {ds['max']:.2f}")
    print(f"{'method':<12} {'status':<8} {'MAE':>10} {'RMSE':>10} {'n':>8}  protocol")
    for name, m in report["methods"].items():
        if m["status"] == "ok":
            print(f"{name:<12} {'ok':<8} {m['mae']:>10.4f} {m['rmse']:>10.4f} {m['n']:>8d}  "
                  f"{m['protocol']}")
        else:
            print(f"{name:<12} {'failed':<8} {m.get('error', '')}")
    comp = report["comparison"]
    if "caveat" in comp:
        print(f"NOTE: {comp['caveat']}")
    common = comp.get("common")
    if common and common["n"]:
        scores = ", ".join(f"{k} {v:.4f}" for k, v in common["mae"].items())
        print(f"common test points ({common['n']}): MAE {scores}")


def _cmd_report(args) -> int:
    path = Path(args.input)
    if path.is_dir():
        path = path / "report.json"
    try:
        report = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        print(f"data error: cannot read {path}: {exc}", file=sys.stderr)
        return EXIT_DATA
    _print_summary(report)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridcast", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment from a config file")
    p.add_argument("--config", required=True, help="INI experiment config")
    p.add_argument("--out", help="override [run] output_dir")
    p.add_argument("--unified-eval", action="store_true",
                   help="score every method on the rolling-origin windows")
    p.add_argument("--parallel-methods", action="store_true",
                   help="run the methods concurrently")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("synth", help="write a synthetic dataset as CSV files")
    p.add_argument("--seed", type=int, default=SyntheticConfig.seed)
    p.add_argument("--days", type=int, default=SyntheticConfig.days)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("report", help="summarise a finished run")
    p.add_argument("--in", dest="input", required=True, help="run directory or report.json")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
