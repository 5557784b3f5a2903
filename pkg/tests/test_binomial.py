"""Tests for the two-velocity stepper and its velocity fields."""

import math

import numpy as np
import pytest

from src.binomial import (
    acceleration_field,
    backward_velocity,
    ballistic_lobe_masses,
    direct_backward_velocity,
    forward_velocity,
    invert_step,
    parity_class_masses,
    simulate,
    step_binomial,
)
from src.lattice import (
    BoundaryError,
    JointDensity2,
    RateForm,
    RateSpec2,
    gaussian_initial,
    make_grid,
    point_mass,
    shift_rows,
    total_mass,
)
from tests.factories import random_joint_density
from tests.oracle import PathEnumeration, enumerate_distribution, joint_density_states, to_joint_density


def _mean_position(q):
    return math.fsum(q.grid.x * q.rho) / total_mass(q)


class TestStepBinomial:
    """Single-step checks on a point mass."""

    @pytest.fixture
    def grid(self):
        return make_grid(1.0, 1.0, -3, 3)

    def test_no_switching_is_pure_transport(self, grid):
        q = step_binomial(point_mass(grid, 0, 1), RateSpec2.constant(0.0, 0.0))
        assert q.q_plus[grid.index_of(1)] == 1.0
        assert total_mass(q) == 1.0
        assert q.t == 1.0

    def test_certain_switching_reverses_on_arrival(self, grid):
        q = step_binomial(point_mass(grid, 0, 1), RateSpec2.constant(1.0, 1.0))
        assert q.q_minus[grid.index_of(1)] == 1.0
        assert q.q_plus[grid.index_of(1)] == 0.0

    def test_partial_switching(self, grid):
        q = step_binomial(point_mass(grid, 0, 1), RateSpec2.constant(0.006, 0.006))
        assert q.q_plus[grid.index_of(1)] == pytest.approx(0.994, abs=1e-15)
        assert q.q_minus[grid.index_of(1)] == pytest.approx(0.006, abs=1e-15)

    def test_down_mover_uses_beta(self, grid):
        q = step_binomial(point_mass(grid, 0, -1), RateSpec2.constant(0.3, 0.1))
        assert q.q_minus[grid.index_of(-1)] == pytest.approx(0.9, abs=1e-15)
        assert q.q_plus[grid.index_of(-1)] == pytest.approx(0.1, abs=1e-15)

    def test_mass_at_grid_edge_raises(self, grid):
        with pytest.raises(BoundaryError):
            step_binomial(point_mass(grid, 3, 1), RateSpec2.constant(0.1, 0.1))

    def test_continuum_rates_scale_with_dt(self):
        grid = make_grid(0.3, 0.003, -3, 3)
        rates = RateSpec2.constant(2.0, 2.0, RateForm.CONTINUUM_RATE)
        q = step_binomial(point_mass(grid, 0, 1), rates)
        assert q.q_minus[grid.index_of(1)] == pytest.approx(0.006, rel=1e-12)


class TestAgainstPathEnumeration:
    """The stepper must reproduce brute-force path sums."""

    def test_constant_rates_six_steps(self, rng):
        grid = make_grid(1.0, 1.0, -2, 2)
        initial = random_joint_density(rng, grid)
        rates = RateSpec2.constant(0.3, 0.1)
        trajectory = simulate(initial, rates, 6)

        pe = PathEnumeration(6, joint_density_states(initial), rates, grid.dx, grid.dt)
        expected = to_joint_density(enumerate_distribution(pe), trajectory.grid, 6.0)

        np.testing.assert_allclose(trajectory.final.q_plus, expected.q_plus, rtol=0, atol=1e-15)
        np.testing.assert_allclose(trajectory.final.q_minus, expected.q_minus, rtol=0, atol=1e-15)


class TestSimulate:
    """Tests for multi-step runs."""

    def test_light_cone_support(self, example1_initial, example1_rates):
        """Test that 150 steps from [-6.9, 6.9] reach exactly [-51.9, 51.9]."""
        trajectory = simulate(example1_initial, example1_rates, 150)
        final = trajectory.final
        assert (final.grid.m_min, final.grid.m_max) == (-173, 173)
        assert final.rho[0] > 0.0 and final.rho[-1] > 0.0
        assert final.grid.x[-1] == pytest.approx(51.9, abs=1e-9)
        assert total_mass(final) == pytest.approx(1.0, abs=1e-12)
        assert final.t == pytest.approx(0.45, abs=1e-12)

    def test_wavefront_mass(self, example1_initial, example1_rates):
        """Only unswitched paths from the outermost node reach the front."""
        final = simulate(example1_initial, example1_rates, 150).final
        expected = example1_initial.q_plus[-1] * 0.994 ** 149
        assert final.rho[final.grid.index_of(173)] == pytest.approx(expected, rel=1e-10)
        assert final.rho[final.grid.index_of(-173)] == pytest.approx(expected, rel=1e-10)

    def test_ballistic_lobes(self, example1_initial, example1_rates):
        up, down = ballistic_lobe_masses(example1_initial, example1_rates, 150)
        assert up == pytest.approx(0.5 * 0.994 ** 149, abs=1e-10)
        assert down == pytest.approx(0.5 * 0.994 ** 149, abs=1e-10)

    def test_symmetric_run_stays_symmetric(self, example1_initial, example1_rates):
        final = simulate(example1_initial, example1_rates, 150).final
        np.testing.assert_allclose(final.rho, final.rho[::-1], rtol=0, atol=1e-15)

    def test_keep_every(self, example1_initial, example1_rates):
        trajectory = simulate(example1_initial, example1_rates, 10, keep_every=4)
        assert trajectory.steps == (0, 4, 8, 10)
        np.testing.assert_allclose(trajectory.times, [0.0, 0.012, 0.024, 0.03], atol=1e-15)

    def test_zero_steps_returns_initial(self, example1_initial, example1_rates):
        trajectory = simulate(example1_initial, example1_rates, 0)
        assert len(trajectory) == 1
        np.testing.assert_array_equal(trajectory.final.q_plus, example1_initial.q_plus)

    def test_mass_conserved_over_ten_thousand_steps(self, rng):
        initial = random_joint_density(rng, make_grid(1.0, 1.0, -3, 3))
        trajectory = simulate(initial, RateSpec2.constant(0.3, 0.2), 10_000, keep_every=2_500)
        assert trajectory.steps == (0, 2_500, 5_000, 7_500, 10_000)
        for snapshot in trajectory.snapshots:
            assert abs(total_mass(snapshot) - total_mass(initial)) <= 1e-12
            assert min(snapshot.q_plus.min(), snapshot.q_minus.min()) >= 0.0

    def test_negative_steps(self, example1_initial, example1_rates):
        with pytest.raises(ValueError, match="nonnegative"):
            simulate(example1_initial, example1_rates, -1)

    def test_mean_moves_by_mean_exit_velocity(self, rng):
        """E[x(t+h)] - E[x(t)] equals h times the mean exit velocity at t."""
        grid = make_grid(0.5, 0.25, -3, 3)
        trajectory = simulate(random_joint_density(rng, grid), RateSpec2.constant(0.3, 0.1), 8)
        for previous, current in zip(trajectory.snapshots, trajectory.snapshots[1:]):
            drift = _mean_position(current) - _mean_position(previous)
            assert drift == pytest.approx(grid.dt * previous.mean_velocity(), abs=1e-12)


class TestParity:
    def test_point_mass_occupies_one_parity_class(self):
        grid = make_grid(1.0, 1.0, -1, 1)
        trajectory = simulate(point_mass(grid, 0, 1), RateSpec2.constant(0.3, 0.2), 7)
        for step, snapshot in zip(trajectory.steps, trajectory.snapshots):
            even, odd = parity_class_masses(snapshot, step)
            assert odd == 0.0
            assert even == pytest.approx(1.0, abs=1e-12)

    def test_class_masses_conserved(self, example1_grid, example1_rates):
        initial = gaussian_initial(example1_grid, 0.1, 6.9)
        start_even, start_odd = parity_class_masses(initial, 0)
        assert start_odd > 0.0
        trajectory = simulate(initial, example1_rates, 150, keep_every=50)
        for step, snapshot in zip(trajectory.steps, trajectory.snapshots):
            even, odd = parity_class_masses(snapshot, step)
            assert even == pytest.approx(start_even, abs=1e-12)
            assert odd == pytest.approx(start_odd, abs=1e-12)


class TestVelocityFields:
    """Forward/backward velocities and the acceleration field."""

    @pytest.fixture
    def grid(self):
        return make_grid(1.0, 1.0, -3, 3)

    def test_forward_velocity_masks_empty_nodes(self, grid):
        q = point_mass(grid, 0, -1)
        field = forward_velocity(q)
        assert field.valid_mask.sum() == 1
        assert field.v[grid.index_of(0)] == -1.0
        assert np.all(field.v[~field.valid_mask] == 0.0)

    @pytest.mark.parametrize("varying", [False, True])
    def test_backward_formula_matches_bayes(self, rng, grid, varying):
        """Test the closed form against path counting over one step."""
        if varying:
            rates = RateSpec2(lambda t, x: 0.2 + 0.05 * np.sin(x + t), lambda t, x: 0.05 + 0.02 * np.cos(x))
        else:
            rates = RateSpec2.constant(0.2, 0.05)
        trajectory = simulate(random_joint_density(rng, grid), rates, 5)
        for previous, current in zip(trajectory.snapshots, trajectory.snapshots[1:]):
            formula = backward_velocity(current, rates)
            bayes = direct_backward_velocity(previous, current)
            np.testing.assert_array_equal(formula.valid_mask, bayes.valid_mask)
            np.testing.assert_allclose(formula.v, bayes.v, rtol=0, atol=1e-12)

    def test_invert_step_recovers_previous(self, rng, grid):
        rates = RateSpec2.constant(0.2, 0.05)
        trajectory = simulate(random_joint_density(rng, grid), rates, 3)
        previous, current = trajectory.snapshots[-2], trajectory.snapshots[-1]
        up, down = invert_step(current, rates)
        expected_up, expected_down = shift_rows(np.vstack([previous.q_plus, previous.q_minus]), (1, -1))
        np.testing.assert_allclose(up, expected_up, rtol=0, atol=1e-15)
        np.testing.assert_allclose(down, expected_down, rtol=0, atol=1e-15)

    def test_singular_transition(self, rng, grid):
        rates = RateSpec2.constant(0.6, 0.5)
        q = step_binomial(random_joint_density(rng, grid), rates)
        with pytest.raises(ValueError, match="singular"):
            backward_velocity(q, rates)

    def test_acceleration_identity(self):
        """(v - v-) / h = -(gamma v + c eps) / (1 - gamma h) for constant rates."""
        grid = make_grid(0.01, 0.001, -5, 5)
        rates = RateSpec2.constant(2.0, 1.0, RateForm.CONTINUUM_RATE)
        gamma, c_eps = 3.0, grid.c * 1.0
        start = JointDensity2(grid, np.full(grid.n_nodes, 0.7 / 11), np.full(grid.n_nodes, 0.3 / 11))
        q = simulate(start, rates, 20).final
        accel = acceleration_field(q, rates)
        v = forward_velocity(q).v
        mask = accel.valid_mask
        expected = -(gamma * v + c_eps) / (1.0 - gamma * grid.dt)
        np.testing.assert_allclose(accel.v[mask], expected[mask], rtol=1e-9, atol=1e-9)

    def test_acceleration_converges_at_first_order(self):
        """The gap to -(gamma v + c eps) halves with h; the wavefront v = c sets its size."""
        rates = RateSpec2.constant(0.4, 0.1, RateForm.CONTINUUM_RATE)
        gamma, c_eps = 0.5, 0.3
        errors = []
        for h in (1e-3, 5e-4, 2.5e-4):
            grid = make_grid(h, h, -5, 5)
            start = JointDensity2(grid, np.full(grid.n_nodes, 0.7 / 11), np.full(grid.n_nodes, 0.3 / 11))
            q = simulate(start, rates, 20).final
            accel = acceleration_field(q, rates)
            mask = accel.valid_mask
            target = -(gamma * forward_velocity(q).v + c_eps)
            errors.append(float(np.max(np.abs(accel.v[mask] - target[mask]))))
        assert errors[0] == pytest.approx((gamma + c_eps) * gamma * 1e-3 / (1.0 - gamma * 1e-3), rel=1e-6)
        assert errors[0] / errors[1] == pytest.approx(2.0, rel=1e-2)
        assert errors[1] / errors[2] == pytest.approx(2.0, rel=1e-2)

    def test_symmetric_rates_decelerate(self, example1_initial, example1_rates):
        q = simulate(example1_initial, example1_rates, 30).final
        accel = acceleration_field(q, example1_rates)
        v = forward_velocity(q).v
        moving = accel.valid_mask & (np.abs(v) > 1.0)
        assert np.all(np.sign(accel.v[moving]) == -np.sign(v[moving]))
