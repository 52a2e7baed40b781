"""Command-line entry point: ``kahlerlab {solve,sweep,verify,curvature,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import scipy.fft as sfft

from . import continuity as ma
from . import scenarios as sc
from .geometry import PositivityError

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3
THREADS_ENV = "KAHLERLAB_THREADS"

logger = logging.getLogger("kahlerlab")


def _threads(value: int | None) -> int:
    """FFT worker count: the flag, else the environment override, else all cores (0)."""
    if value is None:
        env = os.environ.get(THREADS_ENV)
        value = int(env) if env else 0
    if value < 0:
        raise sc.ScenarioError("--threads must be >= 0")
    return value if value > 0 else (os.cpu_count() or 1)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory (default: config 'output' or run-<hash>)")
    common.add_argument("--threads", type=int, default=None,
                        help=f"FFT worker threads, 0 = all cores (env {THREADS_ENV})")
    common.add_argument("--tolerance", type=float, default=None, help="override the Newton residual tolerance")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="kahlerlab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("solve", parents=[common], help="one solve of the family")
    s.add_argument("--config", required=True)
    s.add_argument("--epsilon", type=float, default=None)
    for name, text in (("sweep", "full epsilon sweep and artifacts"),
                       ("verify", "run (if needed) and check every invariant"),
                       ("curvature", "curvature, kappa and M only")):
        q = sub.add_parser(name, parents=[common], help=text)
        q.add_argument("--config", required=True)
        if name == "verify":
            q.add_argument("--no-rerun", action="store_true", help="skip the determinism re-run")
    r = sub.add_parser("report", parents=[common], help="summarize a run directory")
    r.add_argument("directory")
    return p


def _config(args) -> sc.ScenarioConfig:
    cfg = sc.load_scenario(args.config)
    if args.tolerance is not None:
        if not args.tolerance > 0:
            raise sc.ScenarioError("--tolerance must be positive")
        cfg = cfg.with_tolerance(args.tolerance)
    return cfg


def _dispatch(args) -> int:
    if args.command == "report":
        summary = sc.report(args.directory)
        print(json.dumps({k: summary[k] for k in ("classification", "extrapolated_mass0", "min_trace_margin")}))
        return EXIT_OK
    cfg = _config(args)
    if args.command == "solve":
        out = sc.solve_single(cfg, args.epsilon, args.out)
    elif args.command == "sweep":
        out = sc.run(cfg, args.out)
    elif args.command == "curvature":
        out = sc.curvature_only(cfg, args.out)
    else:
        rep = sc.verify(cfg, args.out, rerun=not args.no_rerun)
        for e in rep.entries:
            extra = f" ({e.detail})" if e.detail else ""
            print(f"{e.status.upper():8s} {e.name}{extra}")
        return rep.exit_status
    print(out)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with sfft.set_workers(_threads(args.threads)):
            return _dispatch(args)
    except (sc.ScenarioError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ma.SolverError, ma.NewtonStagnationError, PositivityError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
