"""Command-line entry points for running and comparing experiments."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from .experiments import (
    ConfigError,
    ExperimentConfig,
    compare,
    dump_paths,
    evaluate_oracle,
    run,
    sweep_n,
)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML experiment config file")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any config key (dotted paths reach nested tables)",
    )
    parser.add_argument("--out", help="output directory (overrides out_dir)")
    parser.add_argument("--preset", choices=("desk", "paper"), help="training budget preset")


def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.from_toml(args.config) if args.config else ExperimentConfig()
    if args.overrides:
        config = config.with_overrides(args.overrides)
    if args.preset:
        config = replace(config, preset=args.preset)
    if args.out:
        config = replace(config, out_dir=args.out)
    return config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dlbsde",
        description="Backward deep-learning BSDE solver: run, compare, and sweep experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment (Q seeded solves) and write reports")
    _add_common(p_run)

    p_cmp = sub.add_parser("compare", help="baseline vs differential scheme over an N-list")
    _add_common(p_cmp)

    p_sweep = sub.add_parser("sweep-n", help="grid-refinement sweep for one scheme")
    _add_common(p_sweep)
    p_sweep.add_argument("--n-list", required=True, help="comma-separated ascending step counts")

    p_paths = sub.add_parser("paths-dump", help="simulate one batch and dump the paths as CSV")
    _add_common(p_paths)
    p_paths.add_argument("--batch-size", type=int, default=64)
    p_paths.add_argument("--file", default="paths.csv", help="output CSV file")

    p_oracle = sub.add_parser("oracle", help="evaluate the reference solution standalone")
    _add_common(p_oracle)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config(args)
        if args.command == "run":
            report = run(config, out_dir=config.out_dir)
            print(f"wrote {config.out_dir}/report.json, metrics.csv, plot_series.csv, summary.txt")
            for proc, agg in report.aggregate_data.items():
                print(f"  {proc} rel-MSE at t0: {agg['mean_relative_mse'][0]!r}")
        elif args.command == "compare":
            cfg_dbdp = replace(config, scheme="dbdp")
            cfg_dlbdp = replace(config, scheme="dlbdp")
            rows, _ = compare(cfg_dbdp, cfg_dlbdp, out_dir=config.out_dir)
            print(f"wrote {config.out_dir}/compare.csv and compare.txt")
        elif args.command == "sweep-n":
            n_list = [int(v) for v in args.n_list.split(",") if v.strip()]
            sweep_n(config, n_list, out_dir=config.out_dir)
            print(f"wrote {config.out_dir}/sweep.csv and per-N reports")
        elif args.command == "paths-dump":
            out = dump_paths(config, args.file, batch_size=args.batch_size)
            print(f"wrote {out}")
        elif args.command == "oracle":
            print(json.dumps(evaluate_oracle(config), indent=2))
        return 0
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
