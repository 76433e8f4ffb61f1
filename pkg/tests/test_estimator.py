import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dlbsde.estimator import BackwardSolver, check_state_batch, check_time_index
from dlbsde.problems import make_black_scholes


def _tiny_solver(**overrides):
    params = dict(
        scheme="dlbdp",
        n_steps=2,
        batch_size=16,
        terminal_steps=40,
        interior_steps=20,
        hidden_width=6,
        test_batch_size=16,
        seed=3,
    )
    params.update(overrides)
    return BackwardSolver(**params)


class TestValidationHelpers:
    def test_state_batch_coercion(self):
        out = check_state_batch([1.0, 2.0], dim=2)
        assert out.shape == (1, 2)

    def test_state_batch_shape_error(self):
        with pytest.raises(ValueError):
            check_state_batch(np.ones((3, 4)), dim=2)

    def test_state_batch_finite(self):
        with pytest.raises(ValueError):
            check_state_batch([[np.nan, 1.0]], dim=2)

    def test_time_index_bounds(self):
        assert check_time_index(1, 4) == 1
        with pytest.raises(ValueError):
            check_time_index(4, 4)


class TestEstimatorApi:
    def test_get_set_params_roundtrip(self):
        est = _tiny_solver()
        params = est.get_params()
        assert params["scheme"] == "dlbdp"
        est.set_params(n_steps=4)
        assert est.n_steps == 4

    def test_sklearn_clone(self):
        est = _tiny_solver(seed=11)
        cloned = clone(est)
        assert cloned.get_params() == est.get_params()

    def test_not_fitted_error(self):
        with pytest.raises(NotFittedError):
            _tiny_solver().predict(np.zeros((1, 1)))

    def test_fit_requires_problem(self):
        with pytest.raises(TypeError):
            _tiny_solver().fit(np.zeros((10, 2)))

    def test_fit_predict_shapes(self):
        problem = make_black_scholes(1)
        est = _tiny_solver().fit(problem)
        x = np.log([[100.0], [95.0]])
        y = est.predict(x, n=0)
        assert y.shape == (2,)
        y2, z, g = est.predict_triple(x, n=1)
        assert y2.shape == (2,) and z.shape == (2, 1) and g.shape == (2, 1, 1)
        assert np.isfinite(est.value_at_origin())

    def test_baseline_gamma_available(self):
        problem = make_black_scholes(1)
        est = _tiny_solver(scheme="dbdp").fit(problem)
        _, _, g = est.predict_triple(np.log([[100.0]]), n=1)
        assert g.shape == (1, 1, 1)

    def test_fit_is_deterministic(self):
        problem = make_black_scholes(1)
        x = np.log([[100.0]])
        a = _tiny_solver().fit(problem).predict(x)
        b = _tiny_solver().fit(problem).predict(x)
        assert np.array_equal(a, b)
