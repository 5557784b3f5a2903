"""Tests for grids, joint densities and rate specifications."""

import math

import numpy as np
import pytest

from src.lattice import (
    BoundaryError,
    ConservationError,
    JointDensity2,
    MomentSeries,
    RateForm,
    RateSpec2,
    gaussian_initial,
    make_grid,
    min_entry,
    point_mass,
    shift_rows,
    to_state_density,
    total_mass,
)


class TestMakeGrid:
    """Tests for grid construction."""

    @pytest.mark.parametrize(
        "dx, dt, m_min, m_max, c, n_nodes",
        [
            (0.3, 0.003, -173, 173, 100.0, 347),
            (1, 1, 0, 0, 1.0, 1),
            (0.5, 0.25, -2, 2, 2.0, 5),
        ],
    )
    def test_speed_and_node_count(self, dx, dt, m_min, m_max, c, n_nodes):
        """Test that c = dx/dt and the node count is inclusive."""
        grid = make_grid(dx, dt, m_min, m_max)
        assert grid.c == pytest.approx(c, rel=1e-12)
        assert grid.n_nodes == n_nodes
        assert len(grid.x) == n_nodes

    def test_node_positions(self):
        grid = make_grid(0.5, 0.25, -2, 2)
        np.testing.assert_allclose(grid.x, [-1.0, -0.5, 0.0, 0.5, 1.0])

    @pytest.mark.parametrize("dx, dt", [(0.0, 1.0), (-1.0, 1.0), (1.0, 0.0), (1.0, -0.1)])
    def test_nonpositive_steps(self, dx, dt):
        """Test that nonpositive steps raise."""
        with pytest.raises(ValueError, match="positive"):
            make_grid(dx, dt, 0, 1)

    def test_inverted_bounds(self):
        with pytest.raises(ValueError, match="must not exceed"):
            make_grid(1.0, 1.0, 3, 2)

    def test_index_of_outside_grid(self):
        grid = make_grid(1.0, 1.0, -2, 2)
        assert grid.index_of(-2) == 0
        with pytest.raises(BoundaryError):
            grid.index_of(3)


class TestGaussianInitial:
    """Tests for the truncated Gaussian initial density."""

    def test_example1_density(self, example1_initial):
        """Test symmetry, unit mass and equal velocity split on 47 nodes."""
        q = example1_initial
        assert np.count_nonzero(q.rho) == 47
        np.testing.assert_array_equal(q.q_plus, q.q_minus)
        np.testing.assert_allclose(q.rho, q.rho[::-1], rtol=0, atol=1e-18)
        assert total_mass(q) == pytest.approx(1.0, abs=1e-12)

    def test_narrow_gaussian_is_nearly_a_point_mass(self, example1_grid):
        q = gaussian_initial(example1_grid, 0.1, 6.9)
        centre = example1_grid.index_of(0)
        assert q.rho[centre] > 0.95
        assert q.rho[centre] == q.rho.max()

    def test_flat_limit(self):
        """Test that a huge sigma on 3 nodes gives 1/6 per (node, direction)."""
        grid = make_grid(1.0, 1.0, -1, 1)
        q = gaussian_initial(grid, 1e12, 1.0)
        np.testing.assert_allclose(q.q_plus, 1.0 / 6.0, rtol=1e-12)
        np.testing.assert_allclose(q.q_minus, 1.0 / 6.0, rtol=1e-12)

    def test_invalid_sigma(self, example1_grid):
        with pytest.raises(ValueError, match="sigma"):
            gaussian_initial(example1_grid, 0.0, 6.9)

    def test_support_outside_grid(self, example1_grid):
        with pytest.raises(ValueError, match="outside grid"):
            gaussian_initial(example1_grid, 0.6, 9.0)

    def test_empty_support(self, example1_grid):
        with pytest.raises(ValueError, match="empty"):
            gaussian_initial(example1_grid, 0.6, -1.0)


class TestStateDensity:
    """Tests for rho/phi derivation."""

    def test_symmetric_density_has_no_current(self, example1_initial):
        state = to_state_density(example1_initial)
        np.testing.assert_array_equal(state.phi, 0.0)
        assert math.fsum(state.rho) == pytest.approx(1.0, abs=1e-12)

    def test_only_up_movers(self):
        grid = make_grid(1.0, 1.0, -2, 2)
        values = np.array([0.1, 0.2, 0.4, 0.2, 0.1])
        state = to_state_density(JointDensity2(grid, values, np.zeros(5)))
        np.testing.assert_array_equal(state.rho, values)
        np.testing.assert_array_equal(state.phi, values)

    def test_current_bounded_by_density(self, rng):
        grid = make_grid(1.0, 1.0, -5, 5)
        q = JointDensity2(grid, rng.uniform(size=11), rng.uniform(size=11))
        state = to_state_density(q)
        assert np.all(np.abs(state.phi) <= state.rho)


class TestMassBookkeeping:
    """Tests for total_mass, min_entry and validation."""

    def test_zero_array(self):
        assert total_mass(np.zeros((2, 5))) == 0.0
        assert min_entry(np.zeros(3)) == 0.0

    def test_fresh_density(self, example1_initial):
        assert total_mass(example1_initial) == pytest.approx(1.0, abs=1e-12)
        assert min_entry(example1_initial) >= 0.0

    def test_validate_detects_mass_loss(self, example1_grid):
        q = JointDensity2(example1_grid, np.full(47, 0.01), np.full(47, 0.01))
        with pytest.raises(ConservationError, match="drifted"):
            q.validate()

    def test_validate_detects_negative_entries(self):
        grid = make_grid(1.0, 1.0, 0, 1)
        q = JointDensity2(grid, [1.1, 0.0], [-0.1, 0.0])
        with pytest.raises(ConservationError, match="negative"):
            q.validate()

    def test_densities_are_read_only(self, example1_initial):
        with pytest.raises(ValueError):
            example1_initial.q_plus[0] = 1.0

    def test_shape_mismatch(self, example1_grid):
        with pytest.raises(ValueError, match="shape"):
            JointDensity2(example1_grid, np.zeros(3), np.zeros(3))


class TestFitLightCone:
    """Tests for automatic grid sizing."""

    def test_widens_by_n_steps_around_support(self, example1_initial):
        widened = example1_initial.fit_light_cone(150)
        assert (widened.grid.m_min, widened.grid.m_max) == (-173, 173)
        assert total_mass(widened) == total_mass(example1_initial)

    def test_point_mass_widening(self):
        grid = make_grid(1.0, 1.0, -50, 50)
        q = point_mass(grid, 0, 1)
        assert q.fit_light_cone(10).grid == grid


class TestShiftRows:
    """Tests for row translation."""

    def test_shift_moves_rows_independently(self):
        values = np.array([[0.0, 1.0, 2.0, 0.0], [0.0, 3.0, 4.0, 0.0]])
        shifted = shift_rows(values, (1, -1))
        np.testing.assert_array_equal(shifted, [[0.0, 0.0, 1.0, 2.0], [3.0, 4.0, 0.0, 0.0]])

    def test_mass_leaving_grid_raises(self):
        with pytest.raises(BoundaryError):
            shift_rows(np.array([[0.0, 0.0, 1.0]]), (1,))

    def test_oversized_shift_of_empty_row(self):
        shifted = shift_rows(np.zeros((1, 3)), (5,))
        np.testing.assert_array_equal(shifted, 0.0)


class TestRateSpec2:
    """Tests for two-velocity rate specifications."""

    def test_constant_rates_broadcast(self):
        rates = RateSpec2.constant(0.2, 0.1)
        alpha, beta = rates.evaluate(0.0, np.zeros(4))
        np.testing.assert_array_equal(alpha, 0.2)
        np.testing.assert_array_equal(beta, 0.1)

    def test_continuum_rates_scale_with_h(self):
        rates = RateSpec2.constant(2.0, 1.0, RateForm.CONTINUUM_RATE)
        alpha, beta = rates.step_probabilities(0.0, np.zeros(2), 0.003)
        np.testing.assert_allclose(alpha, 0.006)
        np.testing.assert_allclose(beta, 0.003)

    def test_gamma_and_epsilon(self):
        rates = RateSpec2.constant(0.4, 0.1, RateForm.CONTINUUM_RATE)
        assert float(rates.gamma(0.0, np.zeros(()))) == pytest.approx(0.5)
        assert float(rates.epsilon(0.0, np.zeros(()))) == pytest.approx(0.3)

    @pytest.mark.parametrize("alpha, beta", [(1.2, 0.1), (-0.1, 0.1), (0.5, 1.5)])
    def test_step_probabilities_out_of_range(self, alpha, beta):
        with pytest.raises(ValueError):
            RateSpec2.constant(alpha, beta)

    def test_function_rates_checked_on_evaluation(self):
        rates = RateSpec2(lambda t, x: 1.0 + x, lambda t, x: 0.0 * x)
        with pytest.raises(ValueError, match="alpha"):
            rates.evaluate(0.0, np.array([0.0, 1.0]))

    def test_oversized_continuum_step(self):
        rates = RateSpec2.constant(500.0, 1.0, RateForm.CONTINUUM_RATE)
        with pytest.raises(ValueError, match="reduce the time step"):
            rates.step_probabilities(0.0, np.zeros(1), 0.003)


class TestMomentSeries:
    def test_lengths_must_match(self):
        with pytest.raises(ValueError, match="one length"):
            MomentSeries(np.zeros(3), np.zeros(3), np.zeros(2), np.zeros(3))

    def test_negative_variance_rejected(self):
        with pytest.raises(ValueError, match="nonnegative"):
            MomentSeries(np.zeros(2), np.zeros(2), np.array([0.0, -1.0]), np.zeros(2))
