"""Forward simulation on a uniform grid, with pathwise-derivative matrices.

The solver only supports dynamics whose diffusion matrix depends on time
alone (log-price coordinates for geometric models).  Under that restriction
the derivative of the state with respect to the driving noise collapses to
two small matrices per step: D_n X_n = b(t_n) and
D_n X_{n+1} = (I + grad_a(t_n) dt) b(t_n).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numcore import RngStream, sample_standard_normals_block


class NumericalBlowupError(FloatingPointError):
    """Simulation produced a non-finite state."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of [0, T] into ``steps`` intervals."""

    horizon: float
    steps: int

    def __post_init__(self):
        if self.horizon <= 0 or self.steps < 1:
            raise ValueError("need horizon > 0 and steps >= 1")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    def time(self, n: int) -> float:
        return n * self.horizon / self.steps


@dataclass
class PathBatch:
    """Simulated forward states with their Brownian increments.

    states:          (B, M+1, d) where M <= grid.steps is how far we simulated
    increments:      (B, M, d)
    malliavin_now:   (M, d, d), entry n is D_n X_n = b(t_n)
    malliavin_next:  (M, d, d), entry n is D_n X_{n+1}
    """

    grid: TimeGrid
    states: np.ndarray
    increments: np.ndarray
    malliavin_now: np.ndarray
    malliavin_next: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    @property
    def last_index(self) -> int:
        return self.states.shape[1] - 1


def euler_step(x: np.ndarray, t: float, dt: float, dw: np.ndarray, problem) -> np.ndarray:
    """One Euler-Maruyama step x + a(t, x) dt + b(t) dW for a batch of states."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    dw = np.atleast_2d(np.asarray(dw, dtype=np.float64))
    if dw.shape != x.shape:
        raise ValueError(f"state/noise shape mismatch: {x.shape} vs {dw.shape}")
    nxt = x + problem.drift(t, x) * dt + dw @ problem.diffusion(t).T
    if not np.all(np.isfinite(nxt)):
        raise NumericalBlowupError(f"non-finite state after Euler step at t={t:.6g}")
    return nxt


def malliavin_step(problem, grid: TimeGrid, n: int, batch: Optional[PathBatch] = None):
    """(D_n X_n, D_n X_{n+1}) for step n; the diffusion-gradient term is zero
    because b depends on time only."""
    if not 0 <= n <= grid.steps - 1:
        raise ValueError(f"step index {n} outside [0, {grid.steps - 1}]")
    t = grid.time(n)
    b = problem.diffusion(t)
    if batch is not None and batch.states.shape[1] > n:
        x_ref = batch.states[:, n, :].mean(axis=0)
    else:
        x_ref = np.asarray(problem.x0, dtype=np.float64)
    jac = problem.drift_jacobian(t, x_ref)
    d = b.shape[0]
    return b, (np.eye(d) + jac * grid.dt) @ b


def simulate_paths(
    problem,
    grid: TimeGrid,
    batch_size: int,
    stream: RngStream,
    up_to: Optional[int] = None,
) -> PathBatch:
    """Simulate ``batch_size`` forward paths from x0 on the grid.

    Each sample draws its increments from its own sub-stream indexed by the
    sample id, so the batch content does not depend on evaluation order or
    sharding.  ``up_to`` truncates the simulation after that many steps.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    m = grid.steps if up_to is None else up_to
    if not 1 <= m <= grid.steps:
        raise ValueError(f"up_to must lie in [1, {grid.steps}]")
    d = np.asarray(problem.x0).size
    normals = sample_standard_normals_block(stream, np.arange(batch_size), m * d)
    increments = normals.reshape(batch_size, m, d) * np.sqrt(grid.dt)

    states = np.empty((batch_size, m + 1, d))
    states[:, 0, :] = np.asarray(problem.x0, dtype=np.float64)
    for n in range(m):
        states[:, n + 1, :] = euler_step(
            states[:, n, :], grid.time(n), grid.dt, increments[:, n, :], problem
        )

    mal_now = np.empty((m, d, d))
    mal_next = np.empty((m, d, d))
    batch = PathBatch(grid, states, increments, mal_now, mal_next)
    for n in range(m):
        mal_now[n], mal_next[n] = malliavin_step(problem, grid, n, batch)
    return batch


@dataclass(frozen=True)
class NormalizationStats:
    """Componentwise input statistics at one time point."""

    mean: np.ndarray
    std: np.ndarray
    degenerate: bool  # true at t=0 where the state is deterministic
    empirical: bool = False  # true when analytic moments were unavailable

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.degenerate:
            return x
        return (x - self.mean) / self.std


_EMPIRICAL_STEPS = 32
_EMPIRICAL_SAMPLES = 100_000


def normalization_stats(problem, t: float, stream: Optional[RngStream] = None) -> NormalizationStats:
    """Mean/std of the state at time t, analytic when the problem provides
    moments, otherwise estimated from a pre-simulation (flagged)."""
    if t < 0 or t > problem.horizon + 1e-12:
        raise ValueError(f"time {t} outside [0, {problem.horizon}]")
    d = np.asarray(problem.x0).size
    if t == 0.0:
        return NormalizationStats(
            mean=np.asarray(problem.x0, dtype=np.float64),
            std=np.zeros(d),
            degenerate=True,
        )
    if problem.moments is not None:
        mean, std = problem.moments(t)
        return NormalizationStats(np.asarray(mean, float), np.asarray(std, float), False)
    if stream is None:
        stream = RngStream(seed=0).child("normalization-fallback")
    grid = TimeGrid(horizon=t, steps=_EMPIRICAL_STEPS)
    batch = simulate_paths(problem, grid, _EMPIRICAL_SAMPLES, stream)
    terminal = batch.states[:, -1, :]
    return NormalizationStats(
        mean=terminal.mean(axis=0),
        std=terminal.std(axis=0),
        degenerate=False,
        empirical=True,
    )
