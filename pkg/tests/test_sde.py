import math

import numpy as np
import pytest

from conftest import make_stub_problem
from dlbsde.numcore import RngStream
from dlbsde.problems import make_black_scholes, make_hjb
from dlbsde.sde import (
    NumericalBlowupError,
    TimeGrid,
    euler_step,
    malliavin_step,
    normalization_stats,
    simulate_paths,
)


class TestTimeGrid:
    def test_uniform_spacing(self):
        grid = TimeGrid(horizon=1.0, steps=8)
        assert grid.dt == 0.125
        assert grid.time(3) == pytest.approx(0.375)
        assert grid.time(8) == 1.0

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            TimeGrid(horizon=0.0, steps=4)
        with pytest.raises(ValueError):
            TimeGrid(horizon=1.0, steps=0)


class TestEulerStep:
    def test_zero_coefficients_leave_state(self):
        p = make_stub_problem(d=1, diffusion_mat=[[0.0 + 1e-12]])
        out = euler_step(np.array([[2.0]]), 0.0, 0.5, np.array([[0.3]]), p)
        assert out[0, 0] == pytest.approx(2.0, abs=1e-12)

    def test_deterministic_drift(self):
        p = make_stub_problem(d=1, drift_vec=[1.0], diffusion_mat=[[1.0]])
        out = euler_step(np.array([[2.0]]), 0.0, 0.5, np.array([[0.0]]), p)
        assert out[0, 0] == 2.5

    def test_log_gbm_hand_value(self):
        # drift 0.05 - 0.2^2/2 = 0.03, diffusion 0.2, dW = 0.1, dt = 0.25
        p = make_stub_problem(d=1, drift_vec=[0.03], diffusion_mat=[[0.2]])
        out = euler_step(np.array([[math.log(100.0)]]), 0.0, 0.25, np.array([[0.1]]), p)
        assert out[0, 0] == pytest.approx(math.log(100.0) + 0.0075 + 0.02, abs=1e-15)

    def test_blowup_detected(self):
        p = make_stub_problem(d=1, drift_vec=[float("inf")])
        with pytest.raises(NumericalBlowupError):
            euler_step(np.array([[1.0]]), 0.2, 0.1, np.array([[0.0]]), p)

    def test_shape_mismatch(self):
        p = make_stub_problem(d=2)
        with pytest.raises(ValueError):
            euler_step(np.ones((3, 2)), 0.0, 0.1, np.ones((3, 1)), p)


class TestSimulatePaths:
    def test_frozen_dynamics_keep_x0(self):
        p = make_stub_problem(d=2, x0=[1.0, -2.0], diffusion_mat=np.zeros((2, 2)) + 1e-300)
        batch = simulate_paths(p, TimeGrid(1.0, 4), 16, RngStream(0))
        for n in range(5):
            assert np.allclose(batch.states[:, n, 0], 1.0, atol=1e-12)
            assert np.allclose(batch.states[:, n, 1], -2.0, atol=1e-12)

    def test_deterministic_replay(self):
        p = make_stub_problem(d=2, drift_vec=[0.1, 0.0])
        a = simulate_paths(p, TimeGrid(1.0, 5), 32, RngStream(7).child("x"))
        b = simulate_paths(p, TimeGrid(1.0, 5), 32, RngStream(7).child("x"))
        assert np.array_equal(a.states, b.states)
        assert np.array_equal(a.increments, b.increments)

    def test_increment_moments(self):
        p = make_stub_problem(d=1)
        grid = TimeGrid(1.0, 4)
        batch = simulate_paths(p, grid, 100_000, RngStream(3))
        dw = batch.increments[:, 0, 0]
        se_mean = math.sqrt(grid.dt / dw.size)
        assert abs(dw.mean()) < 3 * se_mean
        se_var = grid.dt * math.sqrt(2.0 / dw.size)
        assert abs(dw.var() - grid.dt) < 3 * se_var

    def test_log_gbm_terminal_mean(self):
        problem = make_black_scholes(1)
        grid = TimeGrid(problem.horizon, 8)
        batch = simulate_paths(problem, grid, 100_000, RngStream(11))
        terminal = batch.states[:, -1, 0]
        expected = math.log(100.0) + (0.05 - 0.5 * 0.2**2) * problem.horizon
        se = 0.2 * math.sqrt(problem.horizon) / math.sqrt(terminal.size)
        assert abs(terminal.mean() - expected) < 3 * se

    def test_partial_simulation_matches_prefix(self):
        p = make_stub_problem(d=1, drift_vec=[0.2])
        grid = TimeGrid(1.0, 6)
        full = simulate_paths(p, grid, 8, RngStream(5))
        part = simulate_paths(p, grid, 8, RngStream(5), up_to=3)
        assert np.array_equal(part.states, full.states[:, :4, :])
        assert np.array_equal(part.increments, full.increments[:, :3, :])

    def test_order_independent_of_batch_size(self):
        # per-sample streams: the first rows of a bigger batch replay exactly
        p = make_stub_problem(d=2)
        grid = TimeGrid(1.0, 3)
        small = simulate_paths(p, grid, 4, RngStream(9))
        large = simulate_paths(p, grid, 64, RngStream(9))
        assert np.array_equal(small.states, large.states[:4])


class TestMalliavin:
    def test_constant_drift_scalar(self):
        p = make_stub_problem(d=1, diffusion_mat=[[0.2]])
        grid = TimeGrid(1.0, 4)
        d_now, d_next = malliavin_step(p, grid, 2)
        assert d_now[0, 0] == 0.2
        assert d_next[0, 0] == 0.2

    def test_drift_gradient_term(self):
        c = 0.7
        p = make_stub_problem(d=1, drift_jac=[[c]], diffusion_mat=[[0.3]])
        grid = TimeGrid(1.0, 5)
        _, d_next = malliavin_step(p, grid, 0)
        assert d_next[0, 0] == pytest.approx((1 + c * grid.dt) * 0.3, abs=1e-15)

    def test_diagonal_multi_asset(self):
        p = make_stub_problem(d=2, diffusion_mat=np.diag([0.2, 0.3]))
        d_now, d_next = malliavin_step(p, TimeGrid(1.0, 4), 1)
        assert np.array_equal(d_now, np.diag([0.2, 0.3]))
        assert np.array_equal(d_next, np.diag([0.2, 0.3]))

    def test_constancy_across_benchmark_grid(self):
        problem = make_black_scholes(2)
        grid = TimeGrid(problem.horizon, 6)
        batch = simulate_paths(problem, grid, 4, RngStream(1))
        for n in range(6):
            assert np.array_equal(batch.malliavin_next[n], problem.diffusion(grid.time(n)))

    def test_index_bounds(self):
        p = make_stub_problem(d=1)
        with pytest.raises(ValueError):
            malliavin_step(p, TimeGrid(1.0, 4), 4)


class TestNormalizationStats:
    def test_degenerate_at_time_zero(self):
        stats = normalization_stats(make_black_scholes(1), 0.0)
        assert stats.degenerate
        assert stats.mean[0] == pytest.approx(math.log(100.0))
        assert np.all(stats.std == 0.0)
        x = np.array([[3.0]])
        assert np.array_equal(stats.apply(x), x)

    def test_log_gbm_analytic(self):
        problem = make_black_scholes(1)
        stats = normalization_stats(problem, 0.5)
        assert stats.mean[0] == pytest.approx(math.log(100.0) + 0.03 * 0.5)
        assert stats.std[0] == pytest.approx(0.2 * math.sqrt(0.5))
        assert not stats.empirical

    def test_arithmetic_dynamics(self):
        problem = make_hjb(3)
        stats = normalization_stats(problem, 0.25)
        assert np.allclose(stats.mean, 1.0)
        assert np.allclose(stats.std, math.sqrt(0.2) * math.sqrt(0.25))

    def test_empirical_fallback_flagged(self):
        p = make_stub_problem(d=1, drift_vec=[0.1], moments=None)
        stats = normalization_stats(p, 0.5, RngStream(2))
        assert stats.empirical
        assert stats.mean[0] == pytest.approx(0.05, abs=0.01)
        assert stats.std[0] == pytest.approx(math.sqrt(0.5), abs=0.02)

    def test_time_outside_horizon(self):
        with pytest.raises(ValueError):
            normalization_stats(make_black_scholes(1), 2.0)


class TestStrongOrder:
    def test_error_halves_when_steps_double(self):
        # Euler on the price-domain geometric dynamics vs the exact terminal
        # sample built from the same increments; cheap version of the full
        # acceptance check.
        rng_batch = 20_000
        a, b, x0, horizon = 0.05, 0.2, 100.0, 1.0
        fine_n = 16
        stub = make_stub_problem(d=1)
        fine = simulate_paths(stub, TimeGrid(horizon, fine_n), rng_batch, RngStream(31))
        increments = fine.increments[:, :, 0]
        w_total = increments.sum(axis=1)
        exact = x0 * np.exp((a - 0.5 * b * b) * horizon + b * w_total)
        errors = {}
        for n in (8, 16):
            step = fine_n // n
            dw = increments.reshape(rng_batch, n, step).sum(axis=2)
            x = np.full(rng_batch, x0)
            dt = horizon / n
            for k in range(n):
                x = x + a * x * dt + b * x * dw[:, k]
            errors[n] = float(np.mean((x - exact) ** 2))
        ratio = errors[16] / errors[8]
        assert 0.35 < ratio < 0.65
