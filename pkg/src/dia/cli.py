"""Command line entry point: ``dia run`` and ``dia oracle``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

from .harness import EXPERIMENTS, DiagnosticSettings, ExperimentConfig, run_experiment
from .sim import ConfigError

log = logging.getLogger("dia")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _parser():
    p = argparse.ArgumentParser(prog="dia", description="Adaptive instrument allocation experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment from a JSON config")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--trials", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--experiment", choices=EXPERIMENTS)
    o = sub.add_parser("oracle", help="brute-force the best unconditional policy")
    o.add_argument("--config", required=True)
    o.add_argument("--out", default=None, help="output directory (default: the config's output)")
    o.add_argument("--grid-step", type=float, default=0.05)
    return p


def _load(args):
    cfg = ExperimentConfig.load(args.config)
    changes = {}
    if getattr(args, "trials", None) is not None:
        changes["trials"] = args.trials
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "experiment", None) is not None:
        changes["experiment"] = args.experiment
    if args.command == "oracle":
        changes["experiment"] = "oracle_table"
        changes["diagnostics"] = replace(cfg.diagnostics, grid_step=args.grid_step)
    return replace(cfg, **changes) if changes else cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _load(args)
    except (ConfigError, OSError) as e:
        print(f"dia: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out if args.out is not None else cfg.output
    try:
        paths = run_experiment(cfg, out)
    except ConfigError as e:
        print(f"dia: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # surfaced as a runtime failure with a nonzero exit
        print(f"dia: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    for p in paths:
        print(os.path.abspath(p))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
