"""Lattice kernels, conditional expectations, scenarios, simulation."""

import math

import numpy as np
import pytest

import gexplab as gx
from gexplab.model import scalar_problem
from conftest import classical_chain_expectation, smooth_bounded_payoff


@pytest.fixture(scope="module")
def lattice(uset):
    grid = gx.GridSpec(t_steps=200, dt=2e-3, x_min=-4.0, x_max=4.0, x_steps=120, vol_levels=5)
    return gx.VolatilityLattice(grid, uset)


# Cone-contained lattice: the dependency cone of the centre node never
# reaches the boundary, so root functionals are exact max-of-means.
@pytest.fixture(scope="module")
def cone_lattice(uset):
    grid = gx.GridSpec(t_steps=50, dt=0.02, x_min=-12.0, x_max=12.0, x_steps=120, vol_levels=5)
    return gx.VolatilityLattice(grid, uset)


class TestKernels:
    def test_probabilities_valid_and_normalised(self, lattice):
        for j in range(lattice.levels.size):
            ph, pm = lattice.p_half[j], lattice.p_mid[j]
            assert 0.0 <= ph <= 0.5 and 0.0 <= pm <= 1.0
            assert abs(2.0 * ph + pm - 1.0) < 1e-15

    def test_local_consistency(self, lattice):
        dx, dt = lattice.grid.dx, lattice.grid.dt
        for j, gamma in enumerate(lattice.levels):
            mean = lattice.p_half[j] * dx - lattice.p_half[j] * dx
            var = 2.0 * lattice.p_half[j] * dx**2
            assert mean == 0.0
            assert var == pytest.approx(gamma * dt, rel=1e-14)

    def test_cfl_enforced_at_construction(self, uset):
        grid = gx.GridSpec(t_steps=10, dt=0.1, x_min=-1, x_max=1, x_steps=50)
        with pytest.raises(gx.CflError):
            gx.VolatilityLattice(grid, uset)


class TestConditionalExpectation:
    def test_square_payoff_matches_max_variance(self, uset):
        grid = gx.GridSpec(t_steps=1000, dt=1e-3, x_min=-6.0, x_max=6.0, x_steps=378, vol_levels=5)
        lat = gx.VolatilityLattice(grid, uset)
        layers = gx.conditional_g_expectation(lat, lat.x**2, 0)
        assert layers[0][lat.root_index()] == pytest.approx(1.0, abs=1e-2)

    def test_constant_preserved_on_every_layer(self, lattice):
        layers = gx.conditional_g_expectation(lattice, np.full(lattice.n_nodes, 2.5), 0)
        assert np.max(np.abs(layers - 2.5)) < 1e-12

    def test_linear_payoff_root_is_zero(self, lattice):
        layers = gx.conditional_g_expectation(lattice, lattice.x.copy(), 0)
        assert abs(layers[0][lattice.root_index()]) < 1e-12

    def test_terminal_length_mismatch(self, lattice):
        with pytest.raises(ValueError):
            gx.conditional_g_expectation(lattice, np.zeros(7), 0)

    def test_returns_all_layers(self, lattice):
        layers = gx.conditional_g_expectation(lattice, lattice.x**2, 10, terminal_step=30)
        assert layers.shape == (21, lattice.n_nodes)
        assert np.array_equal(layers[-1], lattice.x**2)


class TestTower:
    def test_nested_equals_direct(self, lattice):
        rng = np.random.default_rng(5)
        term = smooth_bounded_payoff(rng)(lattice.x)
        assert gx.tower_check(lattice, term, 0, 100) <= 1e-12
        assert gx.tower_check(lattice, lattice.x**2, 0, lattice.grid.t_steps // 2) <= 1e-12

    def test_degenerate_matches_classical_chain(self):
        uset = gx.UncertaintySet(0.8, 0.8)
        grid = gx.GridSpec(t_steps=60, dt=2e-3, x_min=-3.0, x_max=3.0, x_steps=80, vol_levels=1)
        lat = gx.VolatilityLattice(grid, uset)
        rng = np.random.default_rng(8)
        term = smooth_bounded_payoff(rng)(lat.x)
        assert gx.tower_check(lat, term, 0, 30) <= 1e-12
        ours = gx.conditional_g_expectation(lat, term, 0)[0]
        oracle = classical_chain_expectation(lat, term, 0.8, 60)
        assert np.max(np.abs(ours - oracle)) < 1e-10


class TestRootFunctionalAxioms:
    def root(self, lat, values):
        return gx.conditional_g_expectation(lat, values, 0)[0][lat.root_index()]

    def test_axioms_on_random_pairs(self, cone_lattice):
        rng = np.random.default_rng(21)
        lat = cone_lattice
        for _ in range(20):
            a = smooth_bounded_payoff(rng)(lat.x)
            b = smooth_bounded_payoff(rng)(lat.x)
            ra, rb = self.root(lat, a), self.root(lat, b)
            assert self.root(lat, a + np.abs(b)) >= ra - 1e-10  # monotone
            assert self.root(lat, a + b) <= ra + rb + 1e-10  # sub-additive
            lam = float(rng.uniform(0.0, 3.0))
            assert self.root(lat, lam * a) == pytest.approx(lam * ra, abs=1e-10)
            c = float(rng.uniform(-5, 5))
            assert self.root(lat, np.full(lat.n_nodes, c)) == pytest.approx(c, abs=1e-10)

    def test_degenerate_is_additive(self):
        uset = gx.UncertaintySet(1.0, 1.0)
        grid = gx.GridSpec(t_steps=50, dt=0.02, x_min=-12.0, x_max=12.0, x_steps=120, vol_levels=1)
        lat = gx.VolatilityLattice(grid, uset)
        rng = np.random.default_rng(22)
        for _ in range(10):
            a = smooth_bounded_payoff(rng)(lat.x)
            b = smooth_bounded_payoff(rng)(lat.x)
            gap = self.root(lat, a + b) - self.root(lat, a) - self.root(lat, b)
            assert abs(gap) <= 1e-10


class TestLatticeVsPde:
    def test_random_smooth_payoffs_agree_with_heat_solver(self, uset, g_fun):
        rng = np.random.default_rng(31)
        grid_lat = gx.GridSpec(t_steps=1000, dt=1e-3, x_min=-6.0, x_max=6.0, x_steps=378, vol_levels=5)
        lat = gx.VolatilityLattice(grid_lat, uset)
        grid_pde = gx.GridSpec.for_horizon(1.0, 500, -6.0, 6.0, 240)
        for _ in range(3):
            phi = smooth_bounded_payoff(rng)
            root = gx.conditional_g_expectation(lat, phi(lat.x), 0)[0][lat.root_index()]
            pde = gx.g_normal_expectation(g_fun, phi, grid_pde)
            assert root == pytest.approx(pde, abs=1e-2)


class TestScenarios:
    def test_levels_validated(self, uset):
        with pytest.raises(ValueError):
            gx.VolatilityScenario(uset, np.array([0.1, 0.7]))

    def test_constant_builder(self, uset):
        sc = gx.VolatilityScenario.constant(uset, 0.75, 10)
        assert sc.n_steps == 10 and np.all(sc.gamma == 0.75)


class TestSimulation:
    def test_frozen_dynamics(self, uset):
        p = scalar_problem(phi=lambda x: x, horizon=1.0)
        sc = gx.VolatilityScenario.constant(uset, 1.0, 100)
        b = gx.simulate_gsde(p, sc, gx.constant_control(0.0), 50, seed=0, x0=2.0)
        assert np.all(b.X == 2.0)

    def test_pure_drift_integrates_exactly(self, uset):
        p = scalar_problem(b=lambda t, x, v: 1.0, phi=lambda x: x, horizon=1.0)
        sc = gx.VolatilityScenario.constant(uset, 1.0, 1000)
        b = gx.simulate_gsde(p, sc, gx.constant_control(0.0), 3, seed=0, x0=0.0)
        assert np.max(np.abs(b.X[:, -1] - 1.0)) < 1e-12

    def test_quadratic_variation_increments_exact(self, uset):
        p = scalar_problem(sigma=lambda t, x, v: 1.0, phi=lambda x: x, horizon=0.5)
        rng = np.random.default_rng(3)
        gamma = rng.uniform(uset.sigma_min_sq, uset.sigma_max_sq, 64)
        sc = gx.VolatilityScenario(uset, gamma)
        b = gx.simulate_gsde(p, sc, gx.constant_control(0.0), 10, seed=9)
        dt = p.horizon / sc.n_steps
        assert np.array_equal(b.qv_increments, sc.gamma * dt)
        assert np.all(np.diff(b.quad_var, axis=1) > 0.0)

    def test_deterministic_given_seed(self, uset):
        p = gx.catalog_problem("drift-control")
        sc = gx.VolatilityScenario.constant(uset, 1.0, 50)
        b1 = gx.simulate_gsde(p, sc, gx.constant_control(1.0), 20, seed=7)
        b2 = gx.simulate_gsde(p, sc, gx.constant_control(1.0), 20, seed=7)
        assert np.array_equal(b1.X, b2.X) and np.array_equal(b1.B, b2.B)

    def test_early_excursion_bound_stable_under_halving(self, uset):
        # Mean of sup_{s<=delta} |X_s - x0|^2 should scale linearly in delta.
        fitted = []
        for delta, steps in ((0.04, 40), (0.02, 20)):
            p = scalar_problem(sigma=lambda t, x, v: 1.0, phi=lambda x: x, horizon=delta)
            sc = gx.VolatilityScenario.constant(uset, uset.sigma_max_sq, steps)
            b = gx.simulate_gsde(p, sc, gx.constant_control(0.0), 10_000, seed=17, x0=1.0)
            sup_sq = np.max(np.abs(b.X - 1.0), axis=1) ** 2
            fitted.append(float(np.mean(sup_sq)) / ((1.0 + 1.0**2) * delta))
        assert 0.75 <= fitted[0] / fitted[1] <= 1.33

    def test_non_finite_coefficients_raise(self, uset):
        p = scalar_problem(b=lambda t, x, v: np.full_like(x, np.nan), phi=lambda x: x, horizon=0.1)
        sc = gx.VolatilityScenario.constant(uset, 1.0, 5)
        with pytest.raises(ValueError):
            gx.simulate_gsde(p, sc, gx.constant_control(0.0), 2, seed=0)


class TestWorstCase:
    def test_constant_payoff(self, uset):
        p = gx.catalog_problem("pure-gbm")
        sc = [gx.VolatilityScenario.constant(uset, g, 50) for g in (0.5, 1.0)]
        w = gx.worst_case_over_scenarios(p, lambda b: np.full(b.n_paths, 4.2), sc, 200, seed=1)
        assert w == pytest.approx(4.2, abs=1e-12)

    def test_square_terminal_picks_max_variance(self, uset):
        p = gx.catalog_problem("pure-gbm")
        n = 20_000
        sc = [gx.VolatilityScenario.constant(uset, g, 100) for g in (0.5, 1.0)]
        payoff = lambda b: b.X[:, -1] ** 2
        w = gx.worst_case_over_scenarios(p, payoff, sc, n, seed=2)
        # Two MC standard errors of X_T^2 under the max-variance scenario.
        se = math.sqrt(2.0 * 1.0**2 / n)
        assert abs(w - 1.0) <= 2.0 * se + 1e-3

    def test_concave_terminal_picks_min_variance(self, uset):
        p = gx.catalog_problem("pure-gbm")
        n = 20_000
        sc = [gx.VolatilityScenario.constant(uset, g, 100) for g in (0.5, 1.0)]
        w = gx.worst_case_over_scenarios(p, lambda b: -b.X[:, -1] ** 2, sc, n, seed=2)
        se = math.sqrt(2.0 * 0.5**2 / n)
        assert abs(w - (-0.5)) <= 2.0 * se + 1e-3

    def test_monte_carlo_lower_bounds_lattice(self, uset):
        p = gx.catalog_problem("pure-gbm")
        grid = gx.GridSpec(t_steps=400, dt=2.5e-3, x_min=-6.0, x_max=6.0, x_steps=240, vol_levels=5)
        lat = gx.VolatilityLattice(grid, uset)
        rng = np.random.default_rng(41)
        n = 20_000
        for _ in range(3):
            phi = smooth_bounded_payoff(rng)
            lattice_value = gx.conditional_g_expectation(lat, phi(lat.x), 0)[0][lat.root_index()]
            sc = [gx.VolatilityScenario.constant(uset, g, 400) for g in (0.5, 0.75, 1.0)]
            w = gx.worst_case_over_scenarios(p, lambda b: phi(b.X[:, -1]), sc, n, seed=5)
            se = 3.0 / math.sqrt(n)  # payoff bounded by 3
            assert w <= lattice_value + 2.0 * se

    def test_empty_scenario_list_raises(self, uset):
        p = gx.catalog_problem("pure-gbm")
        with pytest.raises(ValueError):
            gx.worst_case_over_scenarios(p, lambda b: b.X[:, -1], [], 10, seed=0)
