"""Spatial grid, marginal measures, couplings and initial conditions.

Conventions
-----------
The spatial domain is [0, 1], discretized into ``m`` cells with midpoint
collocation ``x_i = (i + 1/2) dx``.  The species marginal is a finite list of
atoms ``y_j`` with masses ``nu_j``.  A coupling is stored as the density
matrix ``r`` with respect to the reference measure ``dx (x) nu``, so that the
mass in cell ``i`` for species ``j`` is ``r[i, j] * dx * nu_j``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

__all__ = [
    "Grid1D",
    "MarginalX",
    "SpeciesSet",
    "Coupling",
    "EnergySpec",
    "build_uniform_mu",
    "build_bottleneck_mu",
    "build_equispaced_nu",
    "product_coupling",
    "flipped_coupling",
    "quadratic_spec",
    "table_spec",
    "save_coupling",
    "load_coupling",
]

_MASS_TOL = 1e-12
# constructor tolerance for the two marginal identities of a Coupling
_MARGINAL_TOL = 1e-12


def _as_float_array(a, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class Grid1D:
    """Uniform cell-centered grid on [0, 1]."""

    m: int
    dx: float = field(init=False)
    x: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.m < 1:
            raise ValueError(f"need at least one cell, got m={self.m}")
        dx = 1.0 / self.m
        object.__setattr__(self, "dx", dx)
        x = (np.arange(self.m) + 0.5) * dx
        x.setflags(write=False)
        object.__setattr__(self, "x", x)


@dataclass(frozen=True)
class MarginalX:
    """Density of the spatial marginal mu per cell (w.r.t. dx)."""

    density: np.ndarray

    def __post_init__(self):
        d = _as_float_array(self.density, "density")
        if d.ndim != 1:
            raise ValueError("density must be a vector")
        if np.min(d) <= 0.0:
            raise ValueError("mu must be bounded away from zero")
        total = d.sum() / d.size
        if abs(total - 1.0) > _MASS_TOL:
            raise ValueError(f"mu mass is {total}, expected 1")
        d = d.copy()
        d.setflags(write=False)
        object.__setattr__(self, "density", d)

    @property
    def m(self) -> int:
        return self.density.size


@dataclass(frozen=True)
class SpeciesSet:
    """Finite atomic species marginal nu = sum_j mass_j delta_{y_j}."""

    y: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        y = _as_float_array(self.y, "y")
        mass = _as_float_array(self.mass, "mass")
        if y.shape != mass.shape or y.ndim != 1:
            raise ValueError("y and mass must be vectors of equal length")
        if np.min(mass) <= 0.0:
            raise ValueError("species masses must be positive")
        if abs(mass.sum() - 1.0) > _MASS_TOL:
            raise ValueError(f"species masses sum to {mass.sum()}, expected 1")
        if np.unique(y).size != y.size:
            raise ValueError("species locations must be distinct")
        y = y.copy()
        mass = mass.copy()
        y.setflags(write=False)
        mass.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "mass", mass)

    @property
    def n(self) -> int:
        return self.y.size


@dataclass(frozen=True)
class Coupling:
    """Plan density r w.r.t. dx (x) nu; shape (m, n)."""

    r: np.ndarray

    def __post_init__(self):
        r = _as_float_array(self.r, "r")
        if r.ndim != 2:
            raise ValueError("r must be an m x n matrix")
        if np.min(r) < -_MASS_TOL:
            raise ValueError(f"negative plan density {np.min(r)}")
        r = r.copy()
        r.setflags(write=False)
        object.__setattr__(self, "r", r)

    @property
    def m(self) -> int:
        return self.r.shape[0]

    @property
    def n(self) -> int:
        return self.r.shape[1]

    def x_marginal(self, nu: SpeciesSet) -> np.ndarray:
        """Density of the first marginal w.r.t. dx: sum_j r_ij nu_j."""
        return self.r @ nu.mass

    def y_marginal(self, grid: Grid1D) -> np.ndarray:
        """Per-species total (should be 1 for each j): sum_i r_ij dx."""
        return self.r.sum(axis=0) * grid.dx

    def masses(self, grid: Grid1D, nu: SpeciesSet) -> np.ndarray:
        """Cell/species masses m_ij = r_ij dx nu_j (solver-side view)."""
        return self.r * (grid.dx * nu.mass[None, :])

    def marginal_residuals(self, grid: Grid1D, mu: MarginalX,
                           nu: SpeciesSet) -> tuple[float, float]:
        """Inf-norm defects of the X- and Y-marginal identities."""
        rx = float(np.max(np.abs(self.x_marginal(nu) - mu.density)))
        ry = float(np.max(np.abs(self.y_marginal(grid) - 1.0)))
        return rx, ry


def _check_marginals(c: Coupling, grid: Grid1D, mu: MarginalX, nu: SpeciesSet,
                     tol: float = _MARGINAL_TOL) -> Coupling:
    rx, ry = c.marginal_residuals(grid, mu, nu)
    if rx > tol or ry > tol:
        raise AssertionError(
            f"constructed coupling violates marginals: x={rx:g}, y={ry:g}")
    return c


@dataclass(frozen=True)
class EnergySpec:
    """Potential V(x, y) >= 0, its x-derivative, and the entropy weight."""

    kappa: float
    potential: str
    v_table: np.ndarray
    dv_table: np.ndarray

    def __post_init__(self):
        if self.kappa < 0.0:
            raise ValueError("kappa must be nonnegative")
        v = _as_float_array(self.v_table, "v_table")
        dv = _as_float_array(self.dv_table, "dv_table")
        if v.shape != dv.shape or v.ndim != 2:
            raise ValueError("v_table and dv_table must be matching matrices")
        if np.min(v) < 0.0:
            raise ValueError("potential must be nonnegative")
        v = v.copy()
        dv = dv.copy()
        v.setflags(write=False)
        dv.setflags(write=False)
        object.__setattr__(self, "v_table", v)
        object.__setattr__(self, "dv_table", dv)


def quadratic_spec(grid: Grid1D, nu: SpeciesSet, kappa: float) -> EnergySpec:
    """V(x, y) = |x - y|^2 / 2 tabulated on the grid/species product."""
    diff = grid.x[:, None] - nu.y[None, :]
    return EnergySpec(kappa=kappa, potential="quadratic",
                      v_table=0.5 * diff**2, dv_table=diff)


def table_spec(v_table: np.ndarray, dv_table: np.ndarray,
               kappa: float) -> EnergySpec:
    """User-supplied potential given by matching value/derivative tables."""
    return EnergySpec(kappa=kappa, potential="table",
                      v_table=v_table, dv_table=dv_table)


def build_uniform_mu(grid: Grid1D) -> MarginalX:
    """Lebesgue measure: unit density in every cell."""
    return MarginalX(np.ones(grid.m))


def build_bottleneck_mu(grid: Grid1D, delta: float, ratio: float) -> MarginalX:
    """Piecewise-constant density with a reduced band on [1/2-delta, 1/2+delta].

    The outer level ``a`` is fixed by total mass 1, the inner level is
    ``b = ratio * a``.
    """
    if not 0.0 < delta < 0.5:
        raise ValueError(f"delta must lie in (0, 1/2), got {delta}")
    if ratio <= 0.0:
        raise ValueError(f"ratio must be positive, got {ratio}")
    inside = np.abs(grid.x - 0.5) <= delta + 1e-15
    frac_in = inside.sum() * grid.dx
    # a * (1 - frac_in) + ratio * a * frac_in = 1
    a = 1.0 / (1.0 - frac_in * (1.0 - ratio))
    density = np.where(inside, ratio * a, a)
    return MarginalX(density)


def build_equispaced_nu(n: int) -> SpeciesSet:
    """n equal-mass atoms at the midpoints (j + 1/2) / n."""
    if n < 1:
        raise ValueError(f"need at least one species, got n={n}")
    y = (np.arange(n) + 0.5) / n
    return SpeciesSet(y=y, mass=np.full(n, 1.0 / n))


def product_coupling(mu: MarginalX, nu: SpeciesSet) -> Coupling:
    """rho = mu (x) nu, i.e. r_ij = mu_i for every species."""
    r = np.repeat(mu.density[:, None], nu.n, axis=1)
    grid = Grid1D(mu.m)
    return _check_marginals(Coupling(r), grid, mu, nu)


def flipped_coupling(grid: Grid1D, mu: MarginalX, nu: SpeciesSet) -> Coupling:
    """Monge plan transporting x to 1 - x, blockwise over the species.

    Requires a uniform mu and n | m so that each species fills exactly m/n
    cells with density n.
    """
    if np.max(np.abs(mu.density - 1.0)) > _MASS_TOL:
        raise ValueError("flipped initialization requires uniform mu")
    if grid.m % nu.n != 0:
        raise ValueError(
            f"species count {nu.n} must divide cell count {grid.m}")
    r = np.zeros((grid.m, nu.n))
    # cell i belongs to species j iff x_i in (1 - (j+1)/n, 1 - j/n)
    j_of_i = np.floor((1.0 - grid.x) * nu.n).astype(int)
    j_of_i = np.clip(j_of_i, 0, nu.n - 1)
    r[np.arange(grid.m), j_of_i] = nu.n
    return _check_marginals(Coupling(r), grid, mu, nu)


# ---------------------------------------------------------------------------
# Snapshot I/O: raw little-endian float64 binary + JSON sidecar, CSV mirror.

_CSV_CUTOFF = 65536


def save_coupling(c: Coupling, path: str | Path) -> None:
    """Write ``path`` (binary), ``path.json`` (sidecar) and a CSV mirror.

    The binary holds m*n little-endian float64 values, row-major with the
    species index fastest.  The CSV mirror is written only for
    m*n <= 65536.
    """
    path = Path(path)
    meta = {"m": c.m, "n": c.n, "dtype": "f64", "endianness": "little",
            "layout": "row-major, species fastest"}
    path.write_bytes(np.ascontiguousarray(c.r, dtype="<f8").tobytes())
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(meta, indent=2))
    if c.m * c.n <= _CSV_CUTOFF:
        with path.with_suffix(path.suffix + ".csv").open(
                "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerows(c.r.tolist())


def load_coupling(path: str | Path) -> Coupling:
    """Read a coupling written by :func:`save_coupling`."""
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    if meta.get("dtype") != "f64" or meta.get("endianness") != "little":
        raise ValueError(f"unsupported snapshot format: {meta}")
    raw = np.frombuffer(path.read_bytes(), dtype="<f8")
    if raw.size != meta["m"] * meta["n"]:
        raise ValueError(
            f"snapshot size {raw.size} does not match {meta['m']}x{meta['n']}")
    return Coupling(raw.reshape(meta["m"], meta["n"]).astype(float))
