"""Grids, marginals, couplings, potentials and snapshot I/O."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fiberflow import (Coupling, Grid1D, MarginalX, SpeciesSet,
                       build_bottleneck_mu, build_equispaced_nu,
                       build_uniform_mu, flipped_coupling, load_coupling,
                       product_coupling, quadratic_spec, save_coupling,
                       table_spec)


class TestGrid1D:
    def test_midpoints(self):
        g = Grid1D(4)
        assert g.dx == 0.25
        np.testing.assert_allclose(g.x, [0.125, 0.375, 0.625, 0.875])

    def test_single_cell(self):
        g = Grid1D(1)
        assert g.x[0] == 0.5

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            Grid1D(0)

    @given(st.integers(min_value=1, max_value=1000))
    def test_cells_tile_unit_interval(self, m):
        g = Grid1D(m)
        assert abs(g.m * g.dx - 1.0) < 1e-12
        assert 0.0 < g.x[0] and g.x[-1] < 1.0


class TestMarginalX:
    def test_uniform(self):
        mu = build_uniform_mu(Grid1D(8))
        np.testing.assert_array_equal(mu.density, np.ones(8))

    def test_rejects_nonunit_mass(self):
        with pytest.raises(ValueError):
            MarginalX(np.full(4, 1.1))

    def test_rejects_vanishing_density(self):
        with pytest.raises(ValueError):
            MarginalX(np.array([2.0, 2.0, 0.0, 0.0]))

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            MarginalX(np.array([1.0, np.nan, 1.0, 1.0]))


class TestBottleneck:
    def test_mass_one(self):
        mu = build_bottleneck_mu(Grid1D(256), delta=0.125, ratio=0.5)
        assert abs(mu.density.sum() / 256 - 1.0) < 1e-12

    def test_levels(self):
        # delta=1/8 at m=256: cells with |x-1/2| <= 1/8 span x in
        # [3/8, 5/8], i.e. 64 cells, a quarter of the domain
        mu = build_bottleneck_mu(Grid1D(256), delta=0.125, ratio=0.5)
        inside = np.abs(Grid1D(256).x - 0.5) <= 0.125 + 1e-15
        assert inside.sum() == 64
        a = 8.0 / 7.0  # a (3/4) + (a/2)(1/4) = 1
        np.testing.assert_allclose(mu.density[~inside], a)
        np.testing.assert_allclose(mu.density[inside], a / 2.0)

    def test_ratio_one_is_uniform(self):
        mu = build_bottleneck_mu(Grid1D(64), delta=0.2, ratio=1.0)
        np.testing.assert_allclose(mu.density, 1.0)

    def test_rejects_bad_delta(self):
        with pytest.raises(ValueError):
            build_bottleneck_mu(Grid1D(64), delta=0.6, ratio=0.5)


class TestSpeciesSet:
    def test_equispaced(self):
        nu = build_equispaced_nu(4)
        np.testing.assert_allclose(nu.y, [0.125, 0.375, 0.625, 0.875])
        np.testing.assert_allclose(nu.mass, 0.25)

    def test_rejects_duplicate_atoms(self):
        with pytest.raises(ValueError):
            SpeciesSet(y=np.array([0.3, 0.3]), mass=np.array([0.5, 0.5]))

    def test_rejects_nonunit_mass(self):
        with pytest.raises(ValueError):
            SpeciesSet(y=np.array([0.2, 0.8]), mass=np.array([0.5, 0.6]))


class TestCoupling:
    def test_product_marginals(self):
        grid = Grid1D(32)
        mu = build_bottleneck_mu(grid, 0.125, 0.5)
        nu = build_equispaced_nu(4)
        c = product_coupling(mu, nu)
        rx, ry = c.marginal_residuals(grid, mu, nu)
        assert rx < 1e-12 and ry < 1e-12

    def test_masses_sum_to_one(self):
        grid = Grid1D(16)
        mu = build_uniform_mu(grid)
        nu = build_equispaced_nu(4)
        c = product_coupling(mu, nu)
        assert abs(c.masses(grid, nu).sum() - 1.0) < 1e-12

    def test_rejects_negative_density(self):
        with pytest.raises(ValueError):
            Coupling(np.array([[1.0, -0.5], [1.0, 2.5]]))

    def test_flipped_marginals(self):
        grid = Grid1D(64)
        mu = build_uniform_mu(grid)
        nu = build_equispaced_nu(16)
        c = flipped_coupling(grid, mu, nu)
        rx, ry = c.marginal_residuals(grid, mu, nu)
        assert rx < 1e-12 and ry < 1e-12

    def test_flipped_is_reversal(self):
        # species j occupies the reflected block: cell i holds species
        # floor((1 - x_i) n)
        grid = Grid1D(8)
        nu = build_equispaced_nu(4)
        c = flipped_coupling(grid, build_uniform_mu(grid), nu)
        expect = np.zeros((8, 4))
        expect[[0, 1], 3] = 4.0
        expect[[2, 3], 2] = 4.0
        expect[[4, 5], 1] = 4.0
        expect[[6, 7], 0] = 4.0
        np.testing.assert_array_equal(c.r, expect)

    def test_flipped_needs_uniform_mu(self):
        grid = Grid1D(64)
        mu = build_bottleneck_mu(grid, 0.125, 0.5)
        with pytest.raises(ValueError):
            flipped_coupling(grid, mu, build_equispaced_nu(4))

    def test_flipped_needs_divisibility(self):
        grid = Grid1D(10)
        with pytest.raises(ValueError):
            flipped_coupling(grid, build_uniform_mu(grid),
                             build_equispaced_nu(4))


class TestEnergySpec:
    def test_quadratic_tables(self):
        grid = Grid1D(4)
        nu = build_equispaced_nu(2)
        spec = quadratic_spec(grid, nu, kappa=0.01)
        i, j = 1, 0
        d = grid.x[i] - nu.y[j]
        assert spec.v_table[i, j] == pytest.approx(0.5 * d * d)
        assert spec.dv_table[i, j] == pytest.approx(d)

    def test_rejects_negative_potential(self):
        with pytest.raises(ValueError):
            table_spec(-np.ones((2, 2)), np.zeros((2, 2)), kappa=0.0)

    def test_rejects_negative_kappa(self):
        with pytest.raises(ValueError):
            table_spec(np.ones((2, 2)), np.zeros((2, 2)), kappa=-1.0)


class TestSnapshotIO:
    def test_roundtrip(self, tmp_path):
        grid = Grid1D(16)
        mu = build_uniform_mu(grid)
        nu = build_equispaced_nu(4)
        c = product_coupling(mu, nu)
        path = tmp_path / "snap.bin"
        save_coupling(c, path)
        back = load_coupling(path)
        np.testing.assert_array_equal(back.r, c.r)

    def test_sidecar_and_csv_mirror(self, tmp_path):
        c = Coupling(np.ones((4, 2)) * 0.5 + np.arange(8).reshape(4, 2))
        path = tmp_path / "snap.bin"
        save_coupling(c, path)
        assert path.with_suffix(".bin.json").exists()
        mirror = np.loadtxt(path.with_suffix(".bin.csv"), delimiter=",")
        np.testing.assert_allclose(mirror, c.r)

    def test_no_csv_for_large(self, tmp_path):
        c = Coupling(np.ones((512, 256)))
        path = tmp_path / "big.bin"
        save_coupling(c, path)
        assert not path.with_suffix(".bin.csv").exists()

    def test_rejects_truncated(self, tmp_path):
        c = Coupling(np.ones((4, 4)))
        path = tmp_path / "snap.bin"
        save_coupling(c, path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError):
            load_coupling(path)
