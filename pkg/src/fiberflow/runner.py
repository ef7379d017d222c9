"""Experiment orchestration: configs, runs, on-disk outputs, comparisons.

A run directory contains:

    diagnostics.csv     per-step series (fixed column order)
    snapshot_t<T>.bin   coupling snapshots (+ .json sidecar, .csv mirror)
    pressure_<T>.csv    pressure field per snapshot (columns x, pi)
    manifest.json       fully resolved config plus artifact checksums

The manifest plus outputs determine a bit-identical re-run: all randomness
is seeded and reductions are deterministic.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import diagnostics as diag
from .functionals import energy, fibered_w2
from .jko import StepParams, jko_step
from .measures import (Coupling, EnergySpec, Grid1D, MarginalX, SpeciesSet,
                       build_bottleneck_mu, build_equispaced_nu,
                       build_uniform_mu, flipped_coupling, load_coupling,
                       product_coupling, quadratic_spec, save_coupling)
from .sinkhorn import SinkhornResult, sinkhorn_minimize

__all__ = [
    "RunConfig", "ConfigError", "TrajectoryRecord", "run",
    "fit_convergence_rate", "compare_runs", "load_snapshots",
    "DIAGNOSTIC_COLUMNS",
]

DIAGNOSTIC_COLUMNS = [
    "step", "time", "energy_total", "energy_potential", "energy_entropy",
    "wf_increment", "dissipation", "delta_e", "cp_iters",
    "primal_residual", "dual_residual",
]


class ConfigError(ValueError):
    """Invalid run configuration."""


@dataclass(frozen=True)
class RunConfig:
    m: int
    n: int
    kappa: float
    tau: float
    t_end: float
    potential: dict
    mu_kind: dict
    init: dict
    solver: dict
    sinkhorn_tol: float
    snapshot_times: tuple[float, ...]
    output_dir: str

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        required = ["m", "n", "kappa", "tau", "t_end"]
        missing = [k for k in required if k not in raw]
        if missing:
            raise ConfigError(f"missing required keys: {missing}")
        cfg = cls(
            m=int(raw["m"]),
            n=int(raw["n"]),
            kappa=float(raw["kappa"]),
            tau=float(raw["tau"]),
            t_end=float(raw["t_end"]),
            potential=dict(raw.get("potential", {"name": "quadratic"})),
            mu_kind=dict(raw.get("mu", {"kind": "uniform"})),
            init=dict(raw.get("init", {"kind": "product"})),
            solver=dict(raw.get("solver", {})),
            sinkhorn_tol=float(raw.get("sinkhorn_tol", 1e-10)),
            snapshot_times=tuple(float(t) for t in
                                 raw.get("snapshot_times", [])),
            output_dir=str(raw.get("output_dir", "out")),
        )
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def validate(self) -> None:
        if self.m < 1 or self.n < 1:
            raise ConfigError("m and n must be positive")
        if self.tau <= 0.0:
            raise ConfigError("tau must be positive")
        if self.kappa < 0.0:
            raise ConfigError("kappa must be nonnegative")
        if self.t_end < 0.0:
            raise ConfigError("t_end must be nonnegative")
        ratio = self.t_end / self.tau
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError(
                f"t_end={self.t_end} is not a multiple of tau={self.tau}")
        for t in self.snapshot_times:
            k = t / self.tau
            if abs(k - round(k)) > 1e-9:
                raise ConfigError(
                    f"snapshot time {t} is not a multiple of tau")
            if t > self.t_end + 1e-9:
                raise ConfigError(f"snapshot time {t} exceeds t_end")
        if self.mu_kind.get("kind") not in ("uniform", "bottleneck"):
            raise ConfigError(f"unknown mu kind {self.mu_kind}")
        if self.init.get("kind") not in ("product", "flipped", "file"):
            raise ConfigError(f"unknown init kind {self.init}")
        if self.potential.get("name") != "quadratic":
            raise ConfigError(
                f"unsupported potential {self.potential} (JSON configs "
                "support the quadratic family)")
        if self.sinkhorn_tol <= 0.0:
            raise ConfigError("sinkhorn_tol must be positive")

    def steps(self) -> int:
        return int(round(self.t_end / self.tau))

    def resolved(self) -> dict:
        return {
            "m": self.m, "n": self.n, "kappa": self.kappa, "tau": self.tau,
            "t_end": self.t_end, "potential": self.potential,
            "mu": self.mu_kind, "init": self.init,
            "solver": self.solver_params().__dict__,
            "sinkhorn_tol": self.sinkhorn_tol,
            "snapshot_times": list(self.snapshot_times),
            "output_dir": self.output_dir,
        }

    def solver_params(self) -> StepParams:
        # tau/kappa live at the top level; a resolved config echoes them
        # inside the solver block too, so ignore them there
        extra = {k: v for k, v in self.solver.items()
                 if k not in ("tau", "kappa")}
        return StepParams(tau=self.tau, kappa=self.kappa, **extra)

    def build_problem(self):
        grid = Grid1D(self.m)
        if self.mu_kind["kind"] == "uniform":
            mu = build_uniform_mu(grid)
        else:
            mu = build_bottleneck_mu(grid, float(self.mu_kind["delta"]),
                                     float(self.mu_kind["ratio"]))
        nu = build_equispaced_nu(self.n)
        spec = quadratic_spec(grid, nu, self.kappa)
        kind = self.init["kind"]
        if kind == "product":
            init = product_coupling(mu, nu)
        elif kind == "flipped":
            init = flipped_coupling(grid, mu, nu)
        else:
            init = load_coupling(self.init["path"])
            if init.r.shape != (self.m, self.n):
                raise ConfigError(
                    f"init file shape {init.r.shape} does not match "
                    f"({self.m}, {self.n})")
        return grid, mu, nu, spec, init


@dataclass
class TrajectoryRecord:
    config: RunConfig
    rows: list[dict]
    snapshots: dict[float, Path] = field(default_factory=dict)
    reference: Optional[SinkhornResult] = None
    aborted: bool = False
    error: str = ""

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.rows], dtype=float)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _snapshot_name(t: float) -> str:
    return f"snapshot_t{t:.6g}.bin"


def _safe_dissipation(c: Coupling, pf, grid, nu, spec) -> float:
    if spec.kappa > 0.0 and np.min(c.r) <= 0.0:
        return float("nan")
    return diag.dissipation(c, pf, grid, nu, spec)


def run(config: RunConfig, quiet: bool = True) -> TrajectoryRecord:
    """Execute a configured flow and write the run directory."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid, mu, nu, spec, init = config.build_problem()
    params = config.solver_params()

    record = TrajectoryRecord(config=config, rows=[])
    reference = None
    e_ref = None
    if config.kappa > 0.0:
        reference = sinkhorn_minimize(mu, nu, grid, spec,
                                      tol=config.sinkhorn_tol)
        record.reference = reference
        e_ref = energy(reference.r_star, spec, grid, nu).total

    snapshot_times = set(round(t / config.tau) for t in config.snapshot_times)

    def maybe_snapshot(step_idx: int, c: Coupling):
        if step_idx in snapshot_times:
            t = step_idx * config.tau
            path = out / _snapshot_name(t)
            save_coupling(c, path)
            record.snapshots[t] = path
            pf = diag.pressure_solve(c, mu, grid, spec, nu)
            with (out / f"pressure_{t:.6g}.csv").open("w",
                                                      newline="") as fh:
                wr = csv.writer(fh)
                wr.writerow(["x", "pi"])
                wr.writerows(zip(grid.x.tolist(), pf.pi.tolist()))

    def make_row(step_idx, c, wf_inc, diss, iters, pres, dres):
        eb = energy(c, spec, grid, nu)
        de = float("nan")
        if e_ref is not None:
            de = (eb.total - e_ref) / e_ref
        return {
            "step": step_idx, "time": step_idx * config.tau,
            "energy_total": eb.total, "energy_potential": eb.potential_term,
            "energy_entropy": eb.entropy_term, "wf_increment": wf_inc,
            "dissipation": diss, "delta_e": de, "cp_iters": iters,
            "primal_residual": pres, "dual_residual": dres,
        }

    error = ""
    try:
        pf0 = diag.pressure_solve(init, mu, grid, spec, nu)
        record.rows.append(make_row(
            0, init, 0.0, _safe_dissipation(init, pf0, grid, nu, spec),
            0, 0.0, 0.0))
        maybe_snapshot(0, init)

        current = init
        warm = None
        for k in range(1, config.steps() + 1):
            res = jko_step(current, mu, nu, grid, spec, params, warm=warm)
            if not res.converged:
                record.aborted = True
                error = f"step {k}: {res.message}"
            wf = fibered_w2(res.next, current, grid, nu)
            pf = diag.pressure_solve(res.next, mu, grid, spec, nu)
            record.rows.append(make_row(
                k, res.next, wf,
                _safe_dissipation(res.next, pf, grid, nu, spec),
                res.iterations, res.primal_residual, res.dual_residual))
            maybe_snapshot(k, res.next)
            if record.aborted:
                break
            current = res.next
            warm = res.state
            if not quiet:
                print(f"step {k}/{config.steps()}: "
                      f"E={record.rows[-1]['energy_total']:.6g} "
                      f"iters={res.iterations}")
    except Exception as exc:  # flush partial outputs with the error noted
        record.aborted = True
        error = f"{type(exc).__name__}: {exc}"
        if not quiet:
            raise
    record.error = error

    _write_diagnostics(out / "diagnostics.csv", record.rows)
    manifest = {
        "config": config.resolved(),
        "columns": DIAGNOSTIC_COLUMNS,
        "snapshots": {f"{t:.6g}": p.name for t, p in
                      sorted(record.snapshots.items())},
        "aborted": record.aborted,
    }
    if error:
        manifest["error"] = error
    artifacts = {}
    for p in sorted(out.iterdir()):
        if p.name != "manifest.json" and p.is_file():
            artifacts[p.name] = _sha256(p)
    manifest["artifact_checksums"] = artifacts
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return record


def _write_diagnostics(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=DIAGNOSTIC_COLUMNS)
        wr.writeheader()
        for row in rows:
            wr.writerow({k: row[k] for k in DIAGNOSTIC_COLUMNS})


def fit_convergence_rate(record: TrajectoryRecord, plateau_guard: float,
                         window_top: float = np.inf) -> tuple[float, float]:
    """Least-squares slope of log delta_e vs time over pre-plateau points.

    ``window_top`` caps the fitted delta_e range from above so that decay
    rates of runs started at different energies can be compared over a
    shared window (initial transients are not part of the linear regime).
    """
    t = record.column("time")
    de = record.column("delta_e")
    keep = np.isfinite(de) & (de > plateau_guard) & (de <= window_top)
    if keep.sum() < 5:
        raise ValueError(
            f"need at least 5 pre-plateau points, got {int(keep.sum())}")
    tt, yy = t[keep], np.log(de[keep])
    slope, intercept = np.polyfit(tt, yy, 1)
    fit = slope * tt + intercept
    ss_res = float(np.sum((yy - fit) ** 2))
    ss_tot = float(np.sum((yy - np.mean(yy)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(r2)


def load_snapshots(run_dir: str | Path) -> diag.TrajectorySnapshots:
    """Rebuild the snapshot trajectory of a completed run directory."""
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    cfg = manifest["config"]
    grid = Grid1D(int(cfg["m"]))
    nu = build_equispaced_nu(int(cfg["n"]))
    times = []
    couplings = []
    for t_str, name in sorted(manifest["snapshots"].items(),
                              key=lambda kv: float(kv[0])):
        times.append(float(t_str))
        couplings.append(load_coupling(run_dir / name))
    return diag.TrajectorySnapshots(grid=grid, nu=nu, times=tuple(times),
                                    couplings=tuple(couplings))


def compare_runs(dir_a: str | Path, dir_b: str | Path,
                 zeta_family=None,
                 out_csv: Optional[str | Path] = None) -> np.ndarray:
    """Stability comparison of two run directories at common snapshot times.

    The manifests must agree on the grid size and time step; the species
    counts may differ.  Writes ``comparison.csv`` when ``out_csv`` is given
    and returns the distance matrix (rows = times, columns = observables).
    """
    man_a = json.loads((Path(dir_a) / "manifest.json").read_text())
    man_b = json.loads((Path(dir_b) / "manifest.json").read_text())
    mismatches = {}
    for key in ("m", "tau"):
        va, vb = man_a["config"][key], man_b["config"][key]
        if va != vb:
            mismatches[key] = (va, vb)
    if mismatches:
        raise ValueError(f"incompatible manifests: {mismatches}")
    ta = load_snapshots(dir_a)
    tb = load_snapshots(dir_b)
    times = [t for t in ta.times
             if any(abs(t - s) <= 1e-9 for s in tb.times)]
    dist = diag.stability_compare(ta, tb, zeta_family, times)
    if out_csv is not None:
        labels = ["one", "x", "y", "xy", "x2", "y2"] \
            if zeta_family is None else \
            [f"zeta{i}" for i in range(dist.shape[1])]
        with Path(out_csv).open("w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["time"] + labels)
            for t, row in zip(times, dist):
                wr.writerow([t] + list(row))
    return dist
