"""Command line entry point: ``fedtwin run --config FILE``."""
from __future__ import annotations

import argparse
import logging
import sys

from .config import METHOD_CHOICES, ConfigError, parse_config
from .experiment import run_experiment
from .protocol import ProtocolError

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedtwin", description="Federated transfer learning simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment from a config file")
    run.add_argument("--config", required=True, help="key = value config file")
    run.add_argument("--method", choices=METHOD_CHOICES, help="override the config's method")
    run.add_argument("--seed", type=int, help="override the config's seed")
    run.add_argument("--out-dir", help="override the config's output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config, {"method": args.method, "seed": args.seed,
                                         "out_dir": args.out_dir})
    except ConfigError as exc:
        print(f"fedtwin: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        results = run_experiment(cfg)
    except ProtocolError as exc:
        method = getattr(exc, "method", "?")
        print(f"fedtwin: {method} failed in round {exc.round_index}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError) as exc:
        method = getattr(exc, "method", None)
        where = f" ({method})" if method else ""
        print(f"fedtwin: error{where}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    for res in results:
        conv = "-" if res.convergence_round is None else res.convergence_round
        print(f"{res.method}: overall accuracy {res.report.overall_accuracy:.4f}, "
              f"converged at round {conv}, rounds run {res.rounds_run}")
    print(f"outputs written to {cfg.out_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
