"""Pressure, velocity, dissipation, weak residuals, stability, certificates."""

import numpy as np
import pytest

from fiberflow import (Coupling, Grid1D, build_bottleneck_mu,
                       build_equispaced_nu, build_uniform_mu,
                       flipped_coupling, product_coupling, quadratic_spec,
                       sinkhorn_minimize)
from fiberflow import diagnostics as diag
from fiberflow.diagnostics import (TrajectorySnapshots, ddx,
                                   default_zeta_family, dissipation,
                                   flipped_stationarity_case,
                                   identity_coupling,
                                   identity_stationarity_case,
                                   pressure_solve, stability_compare,
                                   stationarity_certificate, velocity_field,
                                   vertical_average, weak_residual)


def uniform_setup(m, n=4, kappa=0.01):
    grid = Grid1D(m)
    mu = build_uniform_mu(grid)
    nu = build_equispaced_nu(n)
    spec = quadratic_spec(grid, nu, kappa)
    return grid, mu, nu, spec


def analytic_pressure_error(m):
    """L-inf error of the analytic case Pi(x) = x^2/2 - x/2 + 1/12."""
    grid, mu, nu, spec = uniform_setup(m, n=8, kappa=0.0)
    rho = product_coupling(mu, nu)
    pf = pressure_solve(rho, mu, grid, spec, nu)
    exact = grid.x**2 / 2 - grid.x / 2 + 1.0 / 12.0
    return float(np.max(np.abs(pf.pi - exact)))


class TestDdx:
    def test_exact_on_quadratics(self):
        grid = Grid1D(16)
        f = 3.0 * grid.x**2 - grid.x + 2.0
        np.testing.assert_allclose(ddx(f, grid.dx), 6.0 * grid.x - 1.0,
                                   atol=1e-12)

    def test_matrix_columns(self):
        grid = Grid1D(16)
        f = np.column_stack([grid.x**2, grid.x])
        d = ddx(f, grid.dx)
        np.testing.assert_allclose(d[:, 0], 2.0 * grid.x, atol=1e-12)
        np.testing.assert_allclose(d[:, 1], 1.0, atol=1e-12)

    def test_needs_three_cells(self):
        with pytest.raises(ValueError):
            ddx(np.ones(2), 0.5)


class TestPressure:
    def test_analytic_quadratic_case(self):
        # drift u = x - 1/2 for uniform mu and the product plan, so
        # Pi' = x - 1/2 and the zero-mean solution is x^2/2 - x/2 + 1/12
        assert analytic_pressure_error(64) <= 5.0 * (1.0 / 64) ** 2

    def test_second_order(self):
        e32, e128 = analytic_pressure_error(32), analytic_pressure_error(128)
        order = np.log2(e32 / e128) / 2.0
        assert order >= 1.8

    def test_zero_mu_mean(self):
        grid, _, nu, spec = uniform_setup(32)
        mu = build_bottleneck_mu(grid, 0.125, 0.5)
        rho = product_coupling(mu, nu)
        pf = pressure_solve(rho, mu, grid, spec, nu)
        assert abs(pf.mu_mean(mu, grid)) < 1e-12

    def test_bottleneck_flux_continuity(self):
        # the face flux mu Pi' - kappa mu' - u must vanish across the jump
        grid, _, nu, spec = uniform_setup(64, n=8, kappa=0.01)
        mu = build_bottleneck_mu(grid, 0.125, 0.5)
        rho = product_coupling(mu, nu)
        pf = pressure_solve(rho, mu, grid, spec, nu)
        mud = mu.density
        u = (spec.dv_table * rho.r) @ nu.mass
        mu_face = 0.5 * (mud[:-1] + mud[1:])
        flux = mu_face * np.diff(pf.pi) / grid.dx \
            - spec.kappa * np.diff(mud) / grid.dx \
            - 0.5 * (u[:-1] + u[1:])
        assert np.max(np.abs(flux)) <= 10.0 * grid.dx

    def test_matches_dual_multiplier(self):
        from fiberflow import StepParams, jko_step
        grid, mu, nu, spec = uniform_setup(16, n=4)
        res = sinkhorn_minimize(mu, nu, grid, spec, tol=1e-10)
        params = StepParams(tau=0.25, kappa=0.01, tol=1e-8, max_iters=20000)
        step = jko_step(res.r_star, mu, nu, grid, spec, params)
        pf = pressure_solve(step.next, mu, grid, spec, nu)
        err = np.sqrt(np.sum((pf.pi - step.pressure_dual) ** 2
                             * mu.density) * grid.dx)
        assert err <= 0.05  # O(dx) at m=16


class TestVelocityDissipation:
    def test_zero_at_minimizer(self):
        grid, mu, nu, spec = uniform_setup(64, n=64)
        res = sinkhorn_minimize(mu, nu, grid, spec, tol=1e-10)
        pf = diag.PressureField(pi=res.pi_star)
        v = velocity_field(res.r_star, pf, grid, spec)
        assert np.max(np.abs(v)) <= 1e-2  # stencil error only
        assert dissipation(res.r_star, pf, grid, nu, spec) <= 1e-6

    def test_positive_away_from_minimizer(self):
        grid, mu, nu, spec = uniform_setup(32, n=8)
        rho = product_coupling(mu, nu)
        pf = pressure_solve(rho, mu, grid, spec, nu)
        assert dissipation(rho, pf, grid, nu, spec) > 1e-3

    def test_needs_positive_density_for_entropy(self):
        grid, mu, nu, spec = uniform_setup(32, n=8)
        rho = Coupling(np.zeros((32, 8)))
        pf = diag.PressureField(pi=np.zeros(32))
        with pytest.raises(ValueError):
            velocity_field(rho, pf, grid, spec)


class TestWeakResidual:
    def test_small_at_stationarity(self):
        grid, mu, nu, spec = uniform_setup(64, n=64)
        res = sinkhorn_minimize(mu, nu, grid, spec, tol=1e-10)
        pf = diag.PressureField(pi=res.pi_star)
        out = weak_residual(res.r_star, res.r_star, pf, grid, nu, spec,
                            tau=0.25, k_max=5)
        assert out.shape == (5,)
        assert np.max(out) <= 5.0 * grid.dx

    def test_detects_imbalance(self):
        grid, mu, nu, spec = uniform_setup(32, n=8)
        rho = product_coupling(mu, nu)
        pf = diag.PressureField(pi=np.zeros(grid.m))
        out = weak_residual(rho, rho, pf, grid, nu, spec, tau=0.25, k_max=3)
        assert np.max(out) > 1e-3


class TestVerticalAverages:
    def test_unit_zeta_recovers_mu(self):
        grid, _, nu, _ = uniform_setup(32)
        mu = build_bottleneck_mu(grid, 0.125, 0.5)
        rho = product_coupling(mu, nu)
        one = default_zeta_family()[0]
        np.testing.assert_allclose(vertical_average(rho, one, grid, nu),
                                   mu.density, atol=1e-12)

    def test_product_factorizes(self):
        grid, mu, nu, _ = uniform_setup(16, n=4)
        rho = product_coupling(mu, nu)
        xy = default_zeta_family()[3]
        ybar = float(np.sum(nu.y * nu.mass))
        np.testing.assert_allclose(vertical_average(rho, xy, grid, nu),
                                   grid.x * ybar, atol=1e-12)

    def test_stability_compare_zero_on_self(self):
        grid, mu, nu, _ = uniform_setup(16, n=4)
        rho = product_coupling(mu, nu)
        traj = TrajectorySnapshots(grid=grid, nu=nu, times=(0.0, 0.25),
                                   couplings=(rho, rho))
        dist = stability_compare(traj, traj)
        assert dist.shape == (2, 6)
        assert np.max(dist) == 0.0

    def test_stability_compare_rejects_grid_mismatch(self):
        g16, mu16, nu, _ = uniform_setup(16, n=4)
        g32, mu32, _, _ = uniform_setup(32, n=4)
        ta = TrajectorySnapshots(g16, nu, (0.0,),
                                 (product_coupling(mu16, nu),))
        tb = TrajectorySnapshots(g32, nu, (0.0,),
                                 (product_coupling(mu32, nu),))
        with pytest.raises(ValueError):
            stability_compare(ta, tb)

    def test_species_refinement_shrinks_distance(self):
        grid = Grid1D(64)
        mu = build_uniform_mu(grid)
        fine = build_equispaced_nu(64)
        ref = TrajectorySnapshots(grid, fine, (0.0,),
                                  (flipped_coupling(grid, mu, fine),))
        prev = np.inf
        for n in (4, 16):
            nu = build_equispaced_nu(n)
            tr = TrajectorySnapshots(grid, nu, (0.0,),
                                     (flipped_coupling(grid, mu, nu),))
            d = stability_compare(tr, ref)[0]
            assert d[2] < prev  # the y observable
            prev = d[2]


class TestStationarity:
    def test_identity_gap_tiny(self):
        grid, mu, nu, _ = uniform_setup(32, n=32, kappa=0.0)
        spec = quadratic_spec(grid, nu, 0.0)
        case = identity_stationarity_case(grid, mu, nu)
        gap, _ = stationarity_certificate(case, mu, nu, grid, spec, tau=0.25)
        assert abs(gap) <= 5.0 * grid.dx

    def test_flipped_gap_order_dx(self):
        grid, mu, nu, _ = uniform_setup(32, n=32, kappa=0.0)
        spec = quadratic_spec(grid, nu, 0.0)
        case = flipped_stationarity_case(grid, mu, nu)
        assert case.tau_max == 1.0
        gap, ct = stationarity_certificate(case, mu, nu, grid, spec,
                                           tau=0.25)
        assert abs(gap) <= 5.0 * grid.dx
        assert ct.shape == (grid.m, nu.n)

    def test_rejects_tau_beyond_max(self):
        grid, mu, nu, _ = uniform_setup(16, n=16, kappa=0.0)
        spec = quadratic_spec(grid, nu, 0.0)
        case = flipped_stationarity_case(grid, mu, nu)
        with pytest.raises(ValueError):
            stationarity_certificate(case, mu, nu, grid, spec, tau=1.5)

    def test_rejects_entropic_spec(self):
        grid, mu, nu, _ = uniform_setup(16, n=16, kappa=0.01)
        spec = quadratic_spec(grid, nu, 0.01)
        case = flipped_stationarity_case(grid, mu, nu)
        with pytest.raises(ValueError):
            stationarity_certificate(case, mu, nu, grid, spec, tau=0.25)

    def test_rejects_twist_violation(self):
        from fiberflow.measures import table_spec
        grid, mu, nu, _ = uniform_setup(16, n=2, kappa=0.0)
        spec = table_spec(np.ones((16, 2)), np.ones((16, 2)), kappa=0.0)
        case = identity_stationarity_case(grid, mu, nu)
        with pytest.raises(ValueError):
            stationarity_certificate(case, mu, nu, grid, spec, tau=0.25)

    def test_identity_coupling_marginals(self):
        grid, mu, nu, _ = uniform_setup(16, n=4)
        c = identity_coupling(grid, mu, nu)
        rx, ry = c.marginal_residuals(grid, mu, nu)
        assert max(rx, ry) < 1e-12
