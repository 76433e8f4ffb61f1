"""Estimator-style wrapper so the solver composes with sklearn tooling.

``BackwardSolver`` exposes the usual hyperparameters-in-__init__ /
``fit`` / ``predict`` surface (plus ``get_params``/``set_params`` via
``BaseEstimator``).  ``fit`` takes a problem specification instead of a
data matrix: the solver generates its own training paths from the
problem's dynamics.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .problems import ProblemSpec
from .solver import SchemeConfig, SolveResult, solve_backward


def check_state_batch(x, dim: int) -> np.ndarray:
    """Validate and coerce states to a finite (B, dim) float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValueError(f"states must have shape (B, {dim}), got {np.shape(x)}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("states must be finite")
    return arr


def check_time_index(n, n_steps: int) -> int:
    n = int(n)
    if not 0 <= n < n_steps:
        raise ValueError(f"time index {n} outside [0, {n_steps - 1}]")
    return n


class BackwardSolver(BaseEstimator):
    """Backward dynamic-programming solver with a differential loss.

    Parameters mirror the training configuration; ``fit(problem)`` runs the
    backward sweep and stores the per-timestep networks, after which the
    value, gradient, and gamma surfaces can be queried at any grid index.
    """

    def __init__(
        self,
        scheme: str = "dlbdp",
        n_steps: int = 8,
        batch_size: int = 1024,
        terminal_steps: int = 24000,
        interior_steps: int = 10000,
        hidden_layers: int = 2,
        hidden_width: Optional[int] = None,
        omega1: Optional[float] = None,
        omega2: Optional[float] = None,
        seed: int = 0,
        test_batch_size: int = 1024,
    ):
        self.scheme = scheme
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.terminal_steps = terminal_steps
        self.interior_steps = interior_steps
        self.hidden_layers = hidden_layers
        self.hidden_width = hidden_width
        self.omega1 = omega1
        self.omega2 = omega2
        self.seed = seed
        self.test_batch_size = test_batch_size

    def _config(self) -> SchemeConfig:
        return SchemeConfig(
            scheme=self.scheme,
            n_steps=self.n_steps,
            batch_size=self.batch_size,
            terminal_steps=self.terminal_steps,
            interior_steps=self.interior_steps,
            hidden_layers=self.hidden_layers,
            hidden_width=self.hidden_width,
            omega1=self.omega1,
            omega2=self.omega2,
            seed=self.seed,
            test_batch_size=self.test_batch_size,
        )

    def fit(self, problem: ProblemSpec, y=None) -> "BackwardSolver":
        """Train the per-timestep networks on the given problem."""
        if not isinstance(problem, ProblemSpec):
            raise TypeError("fit expects a ProblemSpec")
        result = solve_backward(self._config(), problem)
        self.problem_ = problem
        self.result_: SolveResult = result
        self.nets_ = result.nets
        return self

    def _require_fitted(self):
        if not hasattr(self, "result_"):
            raise NotFittedError("this solver has not been fitted yet")

    def predict(self, x, n: int = 0) -> np.ndarray:
        """Value estimates at grid index ``n`` for problem-domain states."""
        self._require_fitted()
        n = check_time_index(n, self.result_.grid.steps)
        x = check_state_batch(x, self.problem_.dim)
        y, _, _ = self.nets_[n].evaluate(x)
        return y

    def predict_triple(self, x, n: int = 0):
        """(Y, Z, Gamma) estimates at grid index ``n``.

        Gamma is reported in the problem's training coordinates (log-domain
        for geometric models); the baseline scheme differentiates its
        gradient network instead of reading a dedicated one.
        """
        self._require_fitted()
        n = check_time_index(n, self.result_.grid.steps)
        x = check_state_batch(x, self.problem_.dim)
        nets = self.nets_[n]
        y, z, g = nets.evaluate(x)
        if g is None:
            g = nets.gamma_from_gradient_net(x)
        return y, z, g

    def value_at_origin(self) -> float:
        """Fitted value at (t=0, x0), the quantity most tables report."""
        self._require_fitted()
        x0 = np.asarray(self.problem_.x0, dtype=np.float64).reshape(1, -1)
        return float(self.predict(x0, n=0)[0])
