"""Read-only access to fiberflow run directories.

A run directory contains:

    manifest.json        resolved configuration + artifact checksums
    diagnostics.csv      one row per step (energy, increments, residuals)
    snapshot_t<T>.bin    coupling density, little-endian float64, row-major,
                         species fastest; sidecar <name>.json holds m and n
    pressure_<T>.csv     pressure field per snapshot (columns x, pi)
    sinkhorn_rstar.bin   optional Sinkhorn reference coupling

This module deliberately shares no code with the solver package: it
re-implements the documented file formats so figures can be produced from
the artifacts alone.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class PlotInputError(RuntimeError):
    """A required input file is missing or malformed."""


def require_files(paths: list[Path]) -> None:
    """Raise a single error listing every missing input file."""
    missing = [str(p) for p in paths if not Path(p).exists()]
    if missing:
        raise PlotInputError(
            "missing input files:\n  " + "\n  ".join(missing))


@dataclass(frozen=True)
class Snapshot:
    time: float
    r: np.ndarray  # density w.r.t. dx (x) nu, shape (m, n)

    @property
    def m(self) -> int:
        return self.r.shape[0]

    @property
    def n(self) -> int:
        return self.r.shape[1]


@dataclass(frozen=True)
class RunData:
    path: Path
    manifest: dict
    snapshots: tuple[Snapshot, ...]

    @property
    def m(self) -> int:
        return int(self.manifest["config"]["m"])

    @property
    def n(self) -> int:
        return int(self.manifest["config"]["n"])

    @property
    def label(self) -> str:
        c = self.manifest["config"]
        return (f"m={c['m']} n={c['n']} "
                f"κ={c['kappa']:g} τ={c['tau']:g}")

    def x_centers(self) -> np.ndarray:
        m = self.m
        return (np.arange(m) + 0.5) / m

    def nu_weights(self) -> np.ndarray:
        # species weights are equispaced in every shipped configuration
        return np.full(self.n, 1.0 / self.n)


def load_matrix(path: Path) -> np.ndarray:
    """Read one coupling binary with its JSON sidecar."""
    path = Path(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    require_files([path, sidecar])
    meta = json.loads(sidecar.read_text())
    if meta.get("dtype") != "f64" or meta.get("endianness") != "little":
        raise PlotInputError(f"unsupported binary format in {sidecar}")
    raw = np.frombuffer(path.read_bytes(), dtype="<f8")
    m, n = int(meta["m"]), int(meta["n"])
    if raw.size != m * n:
        raise PlotInputError(
            f"{path}: expected {m}x{n} values, found {raw.size}")
    return raw.reshape(m, n).astype(float)


def load_run(run_dir: str | Path) -> RunData:
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    require_files([manifest_path])
    manifest = json.loads(manifest_path.read_text())
    names = manifest.get("snapshots", {})
    require_files([run_dir / name for name in names.values()])
    snaps = []
    for t_str, name in names.items():
        snaps.append(Snapshot(time=float(t_str),
                              r=load_matrix(run_dir / name)))
    snaps.sort(key=lambda s: s.time)
    return RunData(path=run_dir, manifest=manifest,
                   snapshots=tuple(snaps))


def load_diagnostics(run_dir: str | Path) -> dict[str, np.ndarray]:
    path = Path(run_dir) / "diagnostics.csv"
    require_files([path])
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise PlotInputError(f"{path}: no data rows")
    return {key: np.array([float(row[key]) for row in rows])
            for key in rows[0]}


def load_reference(run_dir: str | Path) -> np.ndarray:
    """Load the Sinkhorn reference coupling written by the sinkhorn verb."""
    return load_matrix(Path(run_dir) / "sinkhorn_rstar.bin")


def band_heights(snapshot: Snapshot, nu: np.ndarray) -> np.ndarray:
    """Per-species contribution to the x-marginal density, shape (m, n).

    Columns stack to the mu density: sum_j heights[:, j] = sum_j r_ij nu_j.
    """
    return snapshot.r * nu[None, :]
