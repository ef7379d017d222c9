"""Command-line entry point.

Verbs: run, sinkhorn, compare, stationarity, selftest.
Exit codes: 0 success, 2 validation error, 3 solver non-convergence.
"""

from __future__ import annotations

import argparse
import json
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import diagnostics as diag
from .functionals import energy
from .jko import StepParams, jko_step
from .measures import (Grid1D, build_equispaced_nu, build_uniform_mu,
                       quadratic_spec, save_coupling)
from .runner import ConfigError, RunConfig, compare_runs, run
from .sinkhorn import sinkhorn_minimize

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NONCONVERGENCE = 3


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config)
    if args.output is not None:
        cfg = RunConfig.from_dict({**cfg.resolved(),
                                   "output_dir": str(args.output)})
    return cfg


def _cmd_run(args) -> int:
    cfg = _load_config(args)
    record = run(cfg, quiet=args.quiet)
    if record.aborted:
        print(f"run aborted: {record.error}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    if not args.quiet:
        last = record.rows[-1]
        print(f"finished {len(record.rows) - 1} steps, "
              f"final energy {last['energy_total']:.8g}")
    return EXIT_OK


def _cmd_sinkhorn(args) -> int:
    cfg = _load_config(args)
    grid, mu, nu, spec, _ = cfg.build_problem()
    if cfg.kappa <= 0.0:
        print("sinkhorn requires kappa > 0", file=sys.stderr)
        return EXIT_VALIDATION
    res = sinkhorn_minimize(mu, nu, grid, spec, tol=cfg.sinkhorn_tol)
    if not res.converged:
        print(f"sinkhorn did not converge: residual "
              f"{res.marginal_residual:g}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_coupling(res.r_star, out / "sinkhorn_rstar.bin")
    np.savetxt(out / "sinkhorn_potentials.csv",
               np.column_stack([grid.x, res.pi_star]),
               delimiter=",", header="x,pi_star", comments="")
    eb = energy(res.r_star, spec, grid, nu)
    if not args.quiet:
        print(f"sinkhorn converged in {res.iterations} iterations, "
              f"E* = {eb.total:.10g}")
    return EXIT_OK


def _cmd_compare(args) -> int:
    out_csv = args.output or (Path(args.dir_a) / "comparison.csv")
    try:
        dist = compare_runs(args.dir_a, args.dir_b, out_csv=out_csv)
    except (ValueError, FileNotFoundError) as exc:
        print(f"comparison rejected: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    if not args.quiet:
        print(f"wrote {out_csv} ({dist.shape[0]} times, "
              f"{dist.shape[1]} observables)")
    return EXIT_OK


def _cmd_stationarity(args) -> int:
    grid = Grid1D(args.m)
    mu = build_uniform_mu(grid)
    nu = build_equispaced_nu(args.n)
    spec = quadratic_spec(grid, nu, kappa=0.0)
    case = diag.flipped_stationarity_case(grid, mu, nu)
    if args.tau > case.tau_max:
        print(f"tau={args.tau} exceeds tau_max={case.tau_max}",
              file=sys.stderr)
        return EXIT_VALIDATION
    gap, _ = diag.stationarity_certificate(case, mu, nu, grid, spec,
                                           args.tau)
    params = StepParams(tau=args.tau, kappa=0.0, tol=1e-8)
    res = jko_step(case.monge_coupling, mu, nu, grid, spec, params)
    if not res.converged:
        print(f"step did not converge: {res.message}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    l1 = float(np.sum(np.abs(
        res.next.masses(grid, nu) - case.monge_coupling.masses(grid, nu))))
    if not args.quiet:
        print(f"dual gap {gap:.3e} (O(dx)={grid.dx:.3e}), "
              f"step L1 change {l1:.3e}")
    return EXIT_OK


def _cmd_selftest(args) -> int:
    with tempfile.TemporaryDirectory() as tmp:
        cfg = RunConfig.from_dict({
            "m": 16, "n": 4, "kappa": 0.01, "tau": 0.25, "t_end": 0.5,
            "snapshot_times": [0.0, 0.5],
            "solver": {"tol": 1e-6, "max_iters": 20000},
            "output_dir": str(Path(tmp) / "selftest"),
        })
        record = run(cfg, quiet=True)
        if record.aborted:
            print(f"selftest failed: {record.error}", file=sys.stderr)
            return EXIT_NONCONVERGENCE
        e = record.column("energy_total")
        if np.any(np.diff(e) > 1e-8):
            print("selftest failed: energy increased", file=sys.stderr)
            return EXIT_NONCONVERGENCE
    if not args.quiet:
        print("selftest ok")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fiberflow",
        description="Fibered-Wasserstein gradient flow simulator")
    parser.add_argument("--quiet", action="store_true",
                        help="suppress progress output")
    sub = parser.add_subparsers(dest="verb", required=True)

    p_run = sub.add_parser("run", help="execute a configured flow")
    p_run.add_argument("--config", required=True, type=Path)
    p_run.add_argument("--output", type=Path, default=None,
                       help="override the config's output directory")
    p_run.set_defaults(fn=_cmd_run)

    p_sink = sub.add_parser("sinkhorn",
                            help="compute the entropic-OT reference")
    p_sink.add_argument("--config", required=True, type=Path)
    p_sink.add_argument("--output", type=Path, default=None)
    p_sink.set_defaults(fn=_cmd_sinkhorn)

    p_cmp = sub.add_parser("compare", help="compare two run directories")
    p_cmp.add_argument("dir_a", type=Path)
    p_cmp.add_argument("dir_b", type=Path)
    p_cmp.add_argument("--output", type=Path, default=None)
    p_cmp.set_defaults(fn=_cmd_compare)

    p_stat = sub.add_parser(
        "stationarity", help="kappa=0 flipped-map stationarity certificate")
    p_stat.add_argument("--m", type=int, default=64)
    p_stat.add_argument("--n", type=int, default=64)
    p_stat.add_argument("--tau", type=float, default=0.25)
    p_stat.set_defaults(fn=_cmd_stationarity)

    p_self = sub.add_parser("selftest", help="small end-to-end smoke run")
    p_self.set_defaults(fn=_cmd_selftest)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
