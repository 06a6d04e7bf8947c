"""Command-line entry point: ``virtualfl run`` and ``virtualfl validate``.

Exit codes: 0 success, 2 configuration error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings

from . import __version__
from .harness import METHODS, ConfigError, check_inputs, load_config, run_experiment
from .metrics import emit_metrics, format_metrics

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="virtualfl", description="Federated multi-task learning simulator.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment and write the metrics CSV")
    validate = sub.add_parser("validate", help="check a config without running it")
    for p in (run, validate):
        p.add_argument("--config", required=True, help="experiment TOML file")
        p.add_argument("--method", choices=METHODS)
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--reps", type=int, help="number of repetitions")
        p.add_argument("--dataset", help="'synthetic', a .csv file or a directory of IDX files")
        p.add_argument("--epochs", type=int, help="per-client epoch budget")
        p.add_argument("--out", help="metrics CSV path (stdout when omitted)")
        p.add_argument("--checkpoint", help="write the VIRTUAL posterior here")
    return parser


def _overrides(args) -> dict:
    return {k: getattr(args, k) for k in ("method", "seed", "reps", "dataset", "epochs", "out", "checkpoint")}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    try:
        cfg = load_config(args.config, _overrides(args))
        check_inputs(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "validate":
        print(f"ok: method={cfg.method} dataset={cfg.dataset.source} reps={cfg.reps} epochs={cfg.epochs}")
        return EXIT_OK

    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            result = run_experiment(cfg)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        for r, msg in result.failures:
            print(f"repetition {r} failed: {msg}", file=sys.stderr)
        if not result.records:
            return EXIT_RUNTIME
        if cfg.out:
            emit_metrics(result.records, cfg.out)
        else:
            sys.stdout.write(format_metrics(result.records))
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    s = result.summary
    print(f"{cfg.method}: average accuracy {s.mean:.4f} +/- {s.std:.4f} over {s.completed} repetition(s)",
          file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
