import numpy as np
import pytest

from dlbsde.neural import (
    INTERIOR_SCHEDULE,
    TERMINAL_SCHEDULE,
    Mlp,
    ScheduleExhaustedError,
    adam_init,
    adam_step,
    expected_blob_size,
    input_jacobian,
    lr_at,
    mlp_forward,
    mlp_from_bytes,
    mlp_init,
    mlp_to_bytes,
    param_count,
    vjp_inputs,
    vjp_params,
)
from dlbsde.numcore import RngStream


def _affine_net(w, b):
    """Single affine layer y = W x + b (no activation)."""
    return Mlp(weights=[np.atleast_2d(np.asarray(w, float))], biases=[np.atleast_1d(np.asarray(b, float))])


def _random_net(d0, d1, layers, width, seed):
    net = mlp_init(d0, d1, layers, width, RngStream(seed).child("net"))
    # nudge biases so activations leave the linear regime
    for bias in net.biases:
        bias += 0.05
    return net


class TestInit:
    def test_param_count_small(self):
        net = mlp_init(1, 1, 2, 3, RngStream(0))
        assert net.param_count == 22
        assert net.param_count == param_count(1, 1, 2, 3)

    def test_param_count_wide(self):
        assert param_count(50, 50, 2, 150) == 37_850
        net = mlp_init(50, 50, 2, 150, RngStream(1))
        assert net.param_count == 37_850

    def test_determinism(self):
        a = mlp_init(3, 2, 2, 8, RngStream(9).child("i"))
        b = mlp_init(3, 2, 2, 8, RngStream(9).child("i"))
        for wa, wb in zip(a.weights, b.weights):
            assert np.array_equal(wa, wb)

    def test_glorot_bounds_and_zero_biases(self):
        net = mlp_init(4, 2, 2, 16, RngStream(5))
        dims = [4, 16, 16, 2]
        for w, n_in, n_out in zip(net.weights, dims[:-1], dims[1:]):
            limit = np.sqrt(6.0 / (n_in + n_out))
            assert np.all(np.abs(w) <= limit)
        assert all(np.all(b == 0) for b in net.biases)

    def test_rejects_degenerate_sizes(self):
        with pytest.raises(ValueError):
            mlp_init(0, 1, 1, 4, RngStream(0))


class TestForward:
    def test_zero_net_maps_to_zero(self):
        net = mlp_init(3, 2, 2, 5, RngStream(0))
        for w in net.weights:
            w[:] = 0.0
        x = np.random.default_rng(0).standard_normal((7, 3))
        assert np.array_equal(mlp_forward(net, x), np.zeros((7, 2)))

    def test_tanh_at_origin(self):
        net = Mlp(weights=[np.ones((1, 1)), np.ones((1, 1))], biases=[np.zeros(1), np.zeros(1)])
        assert mlp_forward(net, np.zeros((1, 1)))[0, 0] == 0.0

    def test_matches_direct_composition(self):
        net = _random_net(3, 2, 2, 6, seed=4)
        x = np.random.default_rng(1).standard_normal((5, 3))
        h = np.tanh(x @ net.weights[0].T + net.biases[0])
        h = np.tanh(h @ net.weights[1].T + net.biases[1])
        expected = h @ net.weights[2].T + net.biases[2]
        assert np.max(np.abs(mlp_forward(net, x) - expected)) < 1e-12

    def test_shape_check(self):
        net = mlp_init(3, 1, 1, 4, RngStream(0))
        with pytest.raises(Exception):
            mlp_forward(net, np.ones((2, 5)))


def _fd_param_grads(net, x, upstream, h):
    grads = []
    for p in net.params():
        g = np.zeros_like(p)
        flat_p, flat_g = p.ravel(), g.ravel()
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + h
            up = float(np.sum(upstream * mlp_forward(net, x)))
            flat_p[i] = orig - h
            down = float(np.sum(upstream * mlp_forward(net, x)))
            flat_p[i] = orig
            flat_g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


class TestVjp:
    def test_zero_upstream(self):
        net = _random_net(2, 3, 2, 4, seed=0)
        x = np.random.default_rng(2).standard_normal((6, 2))
        grads = vjp_params(net, x, np.zeros((6, 3)))
        assert all(np.all(g == 0) for g in grads)

    def test_linear_single_parameter(self):
        net = _affine_net([[2.0]], [0.0])
        grads = vjp_params(net, np.array([[3.0]]), np.array([[1.0]]))
        assert grads[0][0, 0] == 3.0  # d(w*x)/dw = x
        assert grads[1][0] == 1.0

    def test_params_match_finite_differences(self):
        net = _random_net(3, 2, 2, 5, seed=8)
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 3))
        upstream = rng.standard_normal((4, 2))
        analytic = vjp_params(net, x, upstream)
        numeric = _fd_param_grads(net, x, upstream, h=1e-5)
        for a, n in zip(analytic, numeric):
            rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
            assert rel.max() < 1e-4

    def test_inputs_zero_for_constant_net(self):
        net = _random_net(2, 2, 1, 4, seed=1)
        net.weights[-1][:] = 0.0  # output layer ignores everything
        x = np.random.default_rng(4).standard_normal((5, 2))
        assert np.array_equal(vjp_inputs(net, x, np.ones((5, 2))), np.zeros((5, 2)))

    def test_inputs_affine_case(self):
        w = np.array([[1.0, -2.0], [0.5, 3.0]])
        net = _affine_net(w, [0.1, -0.4])
        rng = np.random.default_rng(5)
        x = rng.standard_normal((6, 2))
        upstream = rng.standard_normal((6, 2))
        assert np.allclose(vjp_inputs(net, x, upstream), upstream @ w, atol=1e-14)

    def test_inputs_match_finite_differences(self):
        net = _random_net(3, 2, 2, 5, seed=12)
        rng = np.random.default_rng(6)
        x = rng.standard_normal((4, 3))
        upstream = rng.standard_normal((4, 2))
        analytic = vjp_inputs(net, x, upstream)
        h = 1e-5
        numeric = np.zeros_like(x)
        for j in range(3):
            e = np.zeros(3)
            e[j] = h
            numeric[:, j] = np.sum(
                upstream * (mlp_forward(net, x + e) - mlp_forward(net, x - e)), axis=1
            ) / (2 * h)
        rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
        assert rel.max() < 1e-4

    def test_fd_agreement_over_random_probes(self):
        # 100 random probes across the sizes used elsewhere in the suite
        rng = np.random.default_rng(42)
        worst = 0.0
        for probe in range(100):
            net = _random_net(2, 2, 1, 3, seed=1000 + probe)
            x = rng.standard_normal((2, 2))
            upstream = rng.standard_normal((2, 2))
            analytic = vjp_params(net, x, upstream)
            numeric = _fd_param_grads(net, x, upstream, h=1e-5)
            for a, n in zip(analytic, numeric):
                rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
                worst = max(worst, float(rel.max()))
        assert worst < 1e-4


class TestInputJacobian:
    def test_affine_jacobian_is_weight_matrix(self):
        w = np.array([[1.5, 0.25], [-1.0, 2.0]])
        net = _affine_net(w, [0.0, 0.0])
        jac = input_jacobian(net, np.random.default_rng(7).standard_normal((4, 2)))
        for sample in jac:
            assert np.allclose(sample, w, atol=1e-14)

    def test_rows_equal_individual_pulls_bitwise(self):
        net = _random_net(2, 3, 2, 4, seed=3)
        x = np.random.default_rng(8).standard_normal((5, 2))
        jac = input_jacobian(net, x)
        for k in range(3):
            unit = np.zeros((5, 3))
            unit[:, k] = 1.0
            assert np.array_equal(jac[:, k, :], vjp_inputs(net, x, unit))

    def test_scalar_output_matches_vjp(self):
        net = _random_net(3, 1, 1, 4, seed=6)
        x = np.random.default_rng(9).standard_normal((4, 3))
        jac = input_jacobian(net, x)
        assert np.array_equal(jac[:, 0, :], vjp_inputs(net, x, np.ones((4, 1))))

    def test_matches_finite_differences(self):
        net = _random_net(2, 3, 2, 5, seed=14)
        x = np.random.default_rng(10).standard_normal((3, 2))
        jac = input_jacobian(net, x)
        h = 1e-5
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            fd = (mlp_forward(net, x + e) - mlp_forward(net, x - e)) / (2 * h)
            rel = np.abs(jac[:, :, j] - fd) / np.maximum(np.maximum(np.abs(fd), np.abs(jac[:, :, j])), 1e-6)
            assert rel.max() < 1e-5


class TestAdam:
    def test_zero_gradient_is_identity(self):
        net = _random_net(2, 1, 1, 3, seed=2)
        params = net.params()
        state = adam_init(params)
        current = [p.copy() for p in params]
        for _ in range(5):
            current, state = adam_step(current, [np.zeros_like(p) for p in params], state, lr=0.1)
        for p0, p1 in zip(params, current):
            assert np.array_equal(p0, p1)
        assert state.step == 5

    def test_first_step_hand_value(self):
        params = [np.array([0.0])]
        grads = [np.array([1.0])]
        state = adam_init(params)
        new_params, state = adam_step(params, grads, state, lr=0.01)
        # bias-corrected first step: -lr * 1 / (1 + eps)
        assert new_params[0][0] == pytest.approx(-0.01 / (1 + 1e-8), rel=1e-12)
        assert state.step == 1

    def test_constant_gradient_monotone(self):
        params = [np.array([0.0])]
        state = adam_init(params)
        values = [0.0]
        for _ in range(4):
            params, state = adam_step(params, [np.array([2.5])], state, lr=0.05)
            values.append(params[0][0])
        assert all(b < a for a, b in zip(values, values[1:]))

    def test_rejects_nonpositive_lr(self):
        params = [np.zeros(1)]
        with pytest.raises(ValueError):
            adam_step(params, params, adam_init(params), lr=0.0)


class TestSchedules:
    def test_terminal_table(self):
        assert lr_at(TERMINAL_SCHEDULE, 1500) == 1e-2
        assert lr_at(TERMINAL_SCHEDULE, 2000) == 1e-2
        assert lr_at(TERMINAL_SCHEDULE, 2001) == 3e-3
        assert lr_at(TERMINAL_SCHEDULE, 23000) == 1e-5
        assert TERMINAL_SCHEDULE.total_steps == 24000
        assert len(TERMINAL_SCHEDULE.rates) == 7

    def test_interior_table(self):
        assert lr_at(INTERIOR_SCHEDULE, 9000) == 1e-5
        assert lr_at(INTERIOR_SCHEDULE, 1) == 1e-3
        assert INTERIOR_SCHEDULE.total_steps == 10000
        assert len(INTERIOR_SCHEDULE.rates) == 5

    def test_out_of_range(self):
        with pytest.raises(ScheduleExhaustedError):
            lr_at(TERMINAL_SCHEDULE, 0)
        with pytest.raises(ScheduleExhaustedError):
            lr_at(TERMINAL_SCHEDULE, 24001)

    def test_rescaled_keeps_ladder(self):
        small = TERMINAL_SCHEDULE.rescaled(4000)
        assert small.total_steps == 4000
        assert small.rates[0] == 1e-2
        assert lr_at(small, 4000) == TERMINAL_SCHEDULE.rates[-1]
        assert small.boundaries == tuple(sorted(small.boundaries))


class TestSerialization:
    def test_roundtrip_exact(self):
        net = _random_net(3, 2, 2, 5, seed=21)
        blob = mlp_to_bytes(net)
        assert len(blob) == expected_blob_size(net)
        back = mlp_from_bytes(blob)
        assert back.d0 == 3 and back.d1 == 2 and back.hidden_layers == 2 and back.hidden_width == 5
        for a, b in zip(net.params(), back.params()):
            assert np.array_equal(a, b)

    def test_trailing_bytes_rejected(self):
        net = _random_net(2, 1, 1, 3, seed=22)
        with pytest.raises(ValueError):
            mlp_from_bytes(mlp_to_bytes(net) + b"\x00")
