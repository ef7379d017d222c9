"""Physical observables of the flow.

Pressure from the weak elliptic equation, the descent velocity field, the
energy dissipation rate, weak-form residuals against Neumann-compatible test
functions, vertical averages for stability comparisons, and the primal-dual
stationarity certificate for the unregularized (kappa = 0) regime.

All x-derivatives use centered differences inside the domain and one-sided
second-order stencils at the boundary cells, consistent with the Neumann
structure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .measures import (Coupling, EnergySpec, Grid1D, MarginalX, SpeciesSet,
                       flipped_coupling)

__all__ = [
    "PressureField",
    "StationarityCase",
    "ddx",
    "pressure_solve",
    "velocity_field",
    "dissipation",
    "weak_residual",
    "vertical_average",
    "TrajectorySnapshots",
    "stability_compare",
    "default_zeta_family",
    "stationarity_certificate",
    "flipped_stationarity_case",
    "identity_stationarity_case",
    "identity_coupling",
]


@dataclass(frozen=True)
class PressureField:
    pi: np.ndarray

    def mu_mean(self, mu: MarginalX, grid: Grid1D) -> float:
        return float(np.sum(self.pi * mu.density) * grid.dx)


def ddx(f: np.ndarray, dx: float) -> np.ndarray:
    """First derivative along axis 0: centered inside, one-sided at ends."""
    f = np.asarray(f, dtype=float)
    if f.shape[0] < 3:
        raise ValueError("need at least 3 cells for the derivative stencil")
    out = np.empty_like(f)
    out[1:-1] = (f[2:] - f[:-2]) / (2.0 * dx)
    out[0] = (-3.0 * f[0] + 4.0 * f[1] - f[2]) / (2.0 * dx)
    out[-1] = (3.0 * f[-1] - 4.0 * f[-2] + f[-3]) / (2.0 * dx)
    return out


def _drift(rho: Coupling, nu: SpeciesSet, spec: EnergySpec) -> np.ndarray:
    """u_i = sum_j dV/dx(x_i, y_j) r_ij nu_j (potential momentum density)."""
    return (spec.dv_table * rho.r) @ nu.mass


def pressure_solve(rho: Coupling, mu: MarginalX, grid: Grid1D,
                   spec: EnergySpec, nu: SpeciesSet) -> PressureField:
    """Solve the Neumann finite-difference pressure equation.

    Face fluxes satisfy mu_f (Pi_{i+1} - Pi_i)/dx = u_f + kappa (mu_{i+1} -
    mu_i)/dx with zero flux at both boundary faces; mu and u are averaged to
    faces arithmetically.  The resulting tridiagonal system is singular on
    constants; a rank-one correction with the mass vector both regularizes it
    and enforces the zero mu-mean normalization.
    """
    if np.min(mu.density) <= 0.0:
        raise ValueError("mu must be strictly positive")
    m, dx = grid.m, grid.dx
    mud = mu.density
    u = _drift(rho, nu, spec)

    mu_face = 0.5 * (mud[:-1] + mud[1:])            # interior faces
    rhs_face = 0.5 * (u[:-1] + u[1:]) + spec.kappa * np.diff(mud) / dx

    lower = mu_face / dx**2
    a = np.zeros((m, m))
    idx = np.arange(m - 1)
    a[idx, idx] += lower
    a[idx + 1, idx + 1] += lower
    a[idx, idx + 1] -= lower
    a[idx + 1, idx] -= lower
    # divergence of the rhs flux (zero at the boundary faces), sign matched
    # to -div(mu grad Pi) = -div(rhs)
    flux = np.concatenate(([0.0], rhs_face, [0.0]))
    b = -np.diff(flux) / dx

    w = mud * dx  # cell masses; correction pins the mu-mean to zero
    pi = np.linalg.solve(a + np.outer(w, w), b)
    pi -= float(np.sum(pi * w))  # exact zero mean despite rounding
    return PressureField(pi=pi)


def velocity_field(rho: Coupling, pi: PressureField, grid: Grid1D,
                   spec: EnergySpec) -> np.ndarray:
    """v_ij = d/dx Pi - dV/dx - kappa d/dx log r, per cell and species."""
    dpi = ddx(pi.pi, grid.dx)
    v = dpi[:, None] - spec.dv_table
    if spec.kappa > 0.0:
        if np.min(rho.r) <= 0.0:
            raise ValueError(
                "velocity needs a strictly positive density for kappa > 0")
        v = v - spec.kappa * ddx(np.log(rho.r), grid.dx)
    return v


def dissipation(rho: Coupling, pi: PressureField, grid: Grid1D,
                nu: SpeciesSet, spec: EnergySpec) -> float:
    """Energy dissipation rate: integral of |v|^2 against the plan."""
    v = velocity_field(rho, pi, grid, spec)
    w = grid.dx * nu.mass[None, :]
    return float(np.sum(v * v * np.maximum(rho.r, 0.0) * w))


def weak_residual(rho_prev: Coupling, rho_next: Coupling, pi: PressureField,
                  grid: Grid1D, nu: SpeciesSet, spec: EnergySpec, tau: float,
                  k_max: int) -> np.ndarray:
    """Weak-form defect against xi_k(x) = cos(k pi x), k = 1..k_max.

    Returns per k the midpoint-quadrature value of

        | int xi' Pi' dmu - int int xi' dV/dx drho + kappa int xi'' dmu |.

    Each entry is bounded by ||xi_k||_C2 / 2 * W_F(next, prev)^2 / tau up to
    O(dx) discretization error.
    """
    x = grid.x
    mu_density = rho_next.x_marginal(nu)
    dpi = ddx(pi.pi, grid.dx)
    out = np.empty(k_max)
    for k in range(1, k_max + 1):
        kpi = k * np.pi
        dxi = -kpi * np.sin(kpi * x)
        d2xi = -kpi**2 * np.cos(kpi * x)
        t1 = float(np.sum(dxi * dpi * mu_density) * grid.dx)
        t2 = float(np.sum(
            dxi[:, None] * spec.dv_table * rho_next.r
            * (grid.dx * nu.mass[None, :])))
        t3 = spec.kappa * float(np.sum(d2xi * mu_density) * grid.dx)
        out[k - 1] = abs(t1 - t2 + t3)
    return out


def vertical_average(rho: Coupling, zeta: Callable[[np.ndarray, np.ndarray],
                                                   np.ndarray],
                     grid: Grid1D, nu: SpeciesSet) -> np.ndarray:
    """omega_i = sum_j zeta(x_i, y_j) r_ij nu_j."""
    zx = zeta(grid.x[:, None], nu.y[None, :])
    zx = np.broadcast_to(np.asarray(zx, dtype=float), rho.r.shape)
    return (zx * rho.r) @ nu.mass


def default_zeta_family() -> list[Callable]:
    """Observables {1, x, y, xy, x^2, y^2} used for stability comparisons."""
    return [
        lambda x, y: np.ones(np.broadcast_shapes(np.shape(x), np.shape(y))),
        lambda x, y: x + 0.0 * y,
        lambda x, y: y + 0.0 * x,
        lambda x, y: x * y,
        lambda x, y: x**2 + 0.0 * y,
        lambda x, y: y**2 + 0.0 * x,
    ]


@dataclass(frozen=True)
class TrajectorySnapshots:
    """Couplings of one run sampled at a list of times."""

    grid: Grid1D
    nu: SpeciesSet
    times: tuple[float, ...]
    couplings: tuple[Coupling, ...]

    def at(self, t: float, tol: float = 1e-9) -> Coupling:
        for ti, c in zip(self.times, self.couplings):
            if abs(ti - t) <= tol:
                return c
        raise KeyError(f"no snapshot at time {t}")


def stability_compare(traj_a: TrajectorySnapshots,
                      traj_b: TrajectorySnapshots,
                      zeta_family: Optional[Sequence[Callable]] = None,
                      times: Optional[Sequence[float]] = None) -> np.ndarray:
    """L2(dx) distances of vertical averages between two runs.

    Rows are times, columns the zeta family; the species marginals may
    differ (that is what the comparison measures), the grids must match.
    """
    if traj_a.grid.m != traj_b.grid.m:
        raise ValueError(
            f"grids differ: {traj_a.grid.m} vs {traj_b.grid.m}")
    if zeta_family is None:
        zeta_family = default_zeta_family()
    if times is None:
        times = [t for t in traj_a.times
                 if any(abs(t - s) <= 1e-9 for s in traj_b.times)]
    grid = traj_a.grid
    out = np.empty((len(times), len(zeta_family)))
    for ti, t in enumerate(times):
        ca = traj_a.at(t)
        cb = traj_b.at(t)
        for zi, zeta in enumerate(zeta_family):
            wa = vertical_average(ca, zeta, grid, traj_a.nu)
            wb = vertical_average(cb, zeta, grid, traj_b.nu)
            out[ti, zi] = float(np.sqrt(np.sum((wa - wb) ** 2) * grid.dx))
    return out


# ---------------------------------------------------------------------------
# kappa = 0 stationarity certificates


@dataclass(frozen=True)
class StationarityCase:
    """A Monge configuration claimed stationary for the kappa = 0 flow."""

    pi_star: np.ndarray  # potential values on the grid
    phi_hessian_bound: float  # sup |Pi*''|
    tau_max: float  # largest tau with a convex c-transform infimand
    monge_coupling: Coupling


def identity_coupling(grid: Grid1D, mu: MarginalX,
                      nu: SpeciesSet) -> Coupling:
    """Monge plan of the identity arrangement: species j fills x in
    (j/n, (j+1)/n)."""
    if grid.m % nu.n != 0:
        raise ValueError("species count must divide cell count")
    r = np.zeros((grid.m, nu.n))
    j_of_i = np.clip(np.floor(grid.x * nu.n).astype(int), 0, nu.n - 1)
    r[np.arange(grid.m), j_of_i] = nu.n
    return Coupling(r)


def flipped_stationarity_case(grid: Grid1D, mu: MarginalX,
                              nu: SpeciesSet) -> StationarityCase:
    """The flipped Monge map with Pi*(x) = x^2 - x.

    Pi*' = 2x - 1 equals dV/dx(x, 1-x) for the quadratic potential, so the
    flipped arrangement satisfies the stationarity ansatz; convexity of the
    c-transform infimand needs 1/tau + 1 - 2 >= 0, hence tau_max = 1.
    """
    return StationarityCase(
        pi_star=grid.x**2 - grid.x,
        phi_hessian_bound=2.0,
        tau_max=1.0,
        monge_coupling=flipped_coupling(grid, mu, nu),
    )


def identity_stationarity_case(grid: Grid1D, mu: MarginalX,
                               nu: SpeciesSet) -> StationarityCase:
    """The identity arrangement with Pi* = 0 (global optimum, quadratic V)."""
    return StationarityCase(
        pi_star=np.zeros(grid.m),
        phi_hessian_bound=0.0,
        tau_max=np.inf,
        monge_coupling=identity_coupling(grid, mu, nu),
    )


def stationarity_certificate(case: StationarityCase, mu: MarginalX,
                             nu: SpeciesSet, grid: Grid1D, spec: EnergySpec,
                             tau: float) -> tuple[float, np.ndarray]:
    """Primal-dual gap certifying stationarity of a kappa = 0 Monge plan.

    Builds the c-transform Psi*(x', y) = min_x [ (x - x')^2/(2 tau) + V(x, y)
    - Pi*(x) ] by exhaustive minimization over the grid and returns the gap
    between the primal transport score of the candidate plan and the dual
    score of (Pi*, Psi*), together with the c-transform table.
    """
    if spec.kappa != 0.0:
        raise ValueError("stationarity certificates require kappa = 0")
    if tau > case.tau_max:
        raise ValueError(
            f"tau={tau} exceeds tau_max={case.tau_max}; the c-transform "
            "infimand is not guaranteed convex")
    # twist condition: dV/dx(x_i, .) injective over the atoms
    dv_sorted = np.sort(spec.dv_table, axis=1)
    if nu.n > 1 and np.min(np.abs(np.diff(dv_sorted, axis=1))) <= 0.0:
        raise ValueError("potential violates the twist condition on the grid")

    # infimand[i, i', j] reduced over i
    trans = (grid.x[:, None] - grid.x[None, :]) ** 2 / (2.0 * tau)
    reduced = spec.v_table[:, None, :] - case.pi_star[:, None, None]
    c_transform = np.min(trans[:, :, None] + reduced, axis=0)  # (m', n)

    prev_mass = case.monge_coupling.masses(grid, nu)
    dual = float(np.sum(case.pi_star * mu.density) * grid.dx) \
        + float(np.sum(c_transform * prev_mass))
    primal = float(np.sum(spec.v_table * prev_mass))
    return primal - dual, c_transform
