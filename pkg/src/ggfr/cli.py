"""Command-line entry point: one subcommand per scenario.

    ggfr <scenario> --config run.cfg --out results/ [--seed N] [--threads N]
                    [--mem-cap-gb X] [--full-scale]

Environment overrides use the GGFR_ prefix (GGFR_SEED, GGFR_THREADS,
GGFR_MEM_CAP_GB).  --threads caps the BLAS pools for the whole run via
threadpoolctl (plus env variables for pools spawned later).  Exit codes:
0 success, 2 config error, 3 resource refusal, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys

SCENARIO_NAMES = ("qje_sweep", "tcr_panels", "marginal_tcr", "reveal",
                  "convergence_sweep", "sample")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RESOURCE = 3
EXIT_NUMERICAL = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ggfr",
        description="Generalised quantum fluctuation relations on the Dicke model")
    sub = parser.add_subparsers(dest="scenario", required=True)
    for name in SCENARIO_NAMES:
        p = sub.add_parser(name.replace("_", "-"), help=f"run the {name} scenario")
        p.set_defaults(scenario=name)
        p.add_argument("--config", required=True, help="path to the key=value config")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="64-bit RNG seed (overrides config)")
        p.add_argument("--threads", type=int, default=None,
                       help="BLAS thread count (best effort)")
        p.add_argument("--mem-cap-gb", type=float, default=None,
                       help="refuse runs whose estimate exceeds this")
        p.add_argument("--full-scale", action="store_true",
                       help="allow the guarded full-scale regime")
    return parser


def _env_int(name: str) -> int | None:
    raw = os.environ.get(name)
    return int(raw) if raw not in (None, "") else None


def _env_float(name: str) -> float | None:
    raw = os.environ.get(name)
    return float(raw) if raw not in (None, "") else None


def _apply_threads(threads: int | None):
    """Cap BLAS threads; returns a context manager for the run.

    The env variables cover pools created later; threadpoolctl reins in the
    ones numpy already spun up at import time.
    """
    import contextlib

    if threads is None:
        return contextlib.nullcontext()
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(threads)
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=threads)


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)

    seed = args.seed if args.seed is not None else _env_int("GGFR_SEED")
    threads = args.threads if args.threads is not None else _env_int("GGFR_THREADS")
    mem_cap = args.mem_cap_gb if args.mem_cap_gb is not None else _env_float("GGFR_MEM_CAP_GB")

    from .errors import (ConfigError, EigensolverError, MaxIterationsExceeded,
                         MemoryCapExceeded, NonCommutingCharge,
                         TargetOutsideSpectrum, TruncationUnconverged)

    try:
        config_text = open(args.config, encoding="utf-8").read()
    except OSError as exc:
        print(f"ggfr: cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        from .config import parse_config
        cfg = parse_config(config_text, scenario=args.scenario)
    except ConfigError as exc:
        print(f"ggfr: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    from .scenarios import FullScaleRefusal, run_scenario
    try:
        with _apply_threads(threads):
            files = run_scenario(cfg, args.out, seed=seed, config_text=config_text,
                                 mem_cap_gb=mem_cap, full_scale=args.full_scale)
    except (MemoryCapExceeded, FullScaleRefusal) as exc:
        print(f"ggfr: refused: {exc}", file=sys.stderr)
        return EXIT_RESOURCE
    except (TruncationUnconverged, NonCommutingCharge, EigensolverError,
            TargetOutsideSpectrum, MaxIterationsExceeded, FloatingPointError) as exc:
        print(f"ggfr: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"ggfr: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for path in files:
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
