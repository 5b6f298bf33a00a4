"""Command-line pipeline: grid points out, values in, fit, predict, benchmark.

Exit codes: 0 success, 1 usage or validation error, 2 finished with
warnings (e.g. optimizer did not converge; output is still written), 3
numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields

import numpy as np
from threadpoolctl import threadpool_limits

from . import io
from .bench import fit_groups, run_bench
from .gpr import GprConfig, PriorSpec, fit
from .grid import GridError, build_simple_mcr
from .kernel import KernelError
from .krylov import KrylovError

__all__ = ["main", "build_parser", "EXIT_OK", "EXIT_USAGE", "EXIT_WARN", "EXIT_NUMERIC", "WORKERS_ENV"]

EXIT_OK, EXIT_USAGE, EXIT_WARN, EXIT_NUMERIC = 0, 1, 2, 3
WORKERS_ENV = "ARTIFACT_WORKERS"

log = logging.getLogger("artifact")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _workers(args) -> int | None:
    if getattr(args, "threads", None):
        return int(args.threads)
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"{WORKERS_ENV} must be an integer, got {env!r}")
    return None


# config keys settable from the command line, with their flag names
_FLAG_KEYS = {
    "noise": "noise",
    "rank": "rank",
    "probes": "n_probes",
    "cg_tol": "cg_tol",
    "lr": "lr",
    "grad_tol": "grad_tol",
    "max_cycles": "max_cycles",
    "seed": "seed",
}


def effective_config(args) -> tuple[GprConfig, dict]:
    """Flag > config file > default.  Returns the config and the extra file keys."""
    data = io.read_json(args.config) if args.config else {}
    known = {f.name for f in fields(GprConfig)}
    extra = {k: v for k, v in data.items() if k not in known}
    cfg = {k: v for k, v in data.items() if k in known}
    for flag, key in _FLAG_KEYS.items():
        val = getattr(args, flag, None)
        if val is not None:
            cfg[key] = val
    if getattr(args, "no_centering", False):
        cfg["centered"] = False
    if isinstance(cfg.get("prior"), dict):
        cfg["prior"] = PriorSpec(**cfg["prior"])
    try:
        return GprConfig(**cfg), extra
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid configuration: {e}")


def cmd_grid(args) -> int:
    grid = io.read_grid(args.grid)
    if args.out:
        n = io.write_points(args.out, grid)
        log.info("wrote %d points to %s", n, args.out)
    else:
        io.write_points(sys.stdout, grid)
    return EXIT_OK


def cmd_fit(args) -> int:
    grid, y = io.read_dataset(args.dataset)
    config, extra = effective_config(args)
    level = args.kernel_cut_level if args.kernel_cut_level is not None else extra.get("kernel_cut_level")
    kmcr = None
    if level is not None:
        kmcr = build_simple_mcr(grid.D, int(level))
    model = fit(grid, y, config, kmcr)
    io.write_model(args.out, model)
    log.info("wrote model to %s (%d cycles)", args.out, model.diagnostics["cycles"])
    if not model.converged or not model.diagnostics.get("cg_converged", True):
        log.warning("fit finished without convergence; model written anyway")
        return EXIT_WARN
    return EXIT_OK


def cmd_predict(args) -> int:
    model = io.read_model(args.model)
    if args.grid:
        X = io.read_grid(args.grid).coordinates()
    else:
        X = io.read_points(args.points)
    if X.shape[1] != model.grid.D:
        raise UsageError(f"test points have {X.shape[1]} coordinates, model expects {model.grid.D}")
    mean = model.predict_mean(X)
    var = None
    status = EXIT_OK
    if args.variance:
        var, clamped = model.predict_variance(X)
        if clamped:
            log.warning("negative predictive variances were clamped to zero")
            status = EXIT_WARN
    io.write_predictions(args.out or sys.stdout, mean, var)
    return status


def cmd_bench(args) -> int:
    budget = int(args.memory_gb * 2**30) if args.memory_gb else None
    records, refused = run_bench(
        args.alpha, args.n, args.D, args.reps, args.warmup, budget, args.seed, log=lambda s: log.info("%s", s)
    )
    io.write_bench(args.out, records)
    for a, n, D, need in refused:
        print(f"refused: alpha={a} n={n} D={D} needs ~{need / 2**30:.2f} GiB", file=sys.stderr)
    return EXIT_WARN if refused else EXIT_OK


def cmd_bench_fit(args) -> int:
    fits = fit_groups(io.read_bench(args.bench))
    print("alpha,n,points,D_slope,D_intercept,N_slope,N_intercept")
    failed = 0
    for (a, n), f in fits.items():
        if "error" in f:
            print(f"# alpha={a} n={n}: {f['error']}", file=sys.stderr)
            failed += 1
            continue
        d, nn = f["D"], f["N"]
        print(f"{a},{n},{d.points},{d.slope:.4f},{d.intercept:.4f},{nn.slope:.4f},{nn.intercept:.4f}")
    if failed == len(fits):
        return EXIT_USAGE
    return EXIT_WARN if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="artifact", description="Gaussian process regression on cut-based incomplete grids.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("grid", help="write the grid points as CSV in canonical order")
    g.add_argument("grid", help="grid description JSON")
    g.add_argument("--out", help="points CSV (default: stdout)")
    g.set_defaults(func=cmd_grid)

    f = sub.add_parser("fit", help="optimize hyperparameters and write a model")
    f.add_argument("dataset", help="dataset JSON")
    f.add_argument("--config", help="config JSON (flags take precedence)")
    f.add_argument("--out", required=True, help="model JSON")
    f.add_argument("--noise", type=float)
    f.add_argument("--rank", type=int)
    f.add_argument("--probes", type=int)
    f.add_argument("--cg-tol", type=float)
    f.add_argument("--lr", type=float)
    f.add_argument("--grad-tol", type=float)
    f.add_argument("--max-cycles", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--kernel-cut-level", type=int)
    f.add_argument("--no-centering", action="store_true")
    f.add_argument("--threads", type=int, help=f"worker threads (default: ${WORKERS_ENV} or library default)")
    f.set_defaults(func=cmd_fit)

    q = sub.add_parser("predict", help="predict at grid or scattered points")
    q.add_argument("model", help="model JSON")
    src = q.add_mutually_exclusive_group(required=True)
    src.add_argument("--grid", help="test grid JSON")
    src.add_argument("--points", help="points CSV")
    q.add_argument("--variance", action="store_true", help="also write predictive variances")
    q.add_argument("--out", help="predictions CSV (default: stdout)")
    q.add_argument("--threads", type=int)
    q.set_defaults(func=cmd_predict)

    b = sub.add_parser("bench", help="time kernel products on simple grids")
    b.add_argument("--alpha", type=int, nargs="+", required=True)
    b.add_argument("--n", type=int, nargs="+", required=True)
    b.add_argument("--D", type=int, nargs="+", required=True)
    b.add_argument("--reps", type=int, default=3)
    b.add_argument("--warmup", type=float, default=2.0, help="minimum warm-up seconds per instance")
    b.add_argument("--memory-gb", type=float, default=4.0, help="refuse instances estimated above this")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--out", required=True, help="bench CSV")
    b.set_defaults(func=cmd_bench)

    bf = sub.add_parser("bench-fit", help="power-law fits of a bench CSV")
    bf.add_argument("bench", help="bench CSV")
    bf.set_defaults(func=cmd_bench_fit)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * args.verbose
    logging.basicConfig(level=max(level, logging.DEBUG), format="%(levelname)s: %(message)s")
    try:
        workers = _workers(args)
        if workers:
            with threadpool_limits(limits=workers):
                return args.func(args)
        return args.func(args)
    except (UsageError, io.FormatError, GridError, KernelError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (KrylovError, np.linalg.LinAlgError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
