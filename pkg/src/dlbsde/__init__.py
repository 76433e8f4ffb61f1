"""Deep-learning solvers for backward stochastic differential equations.

Trains per-timestep networks for the solution triple (value, gradient,
gamma) of a decoupled FBSDE by backward induction, with a differential
loss that supervises the gradient dynamics through the pathwise
(Malliavin) derivative of the equation.
"""

__version__ = "0.1.0"

from .estimator import BackwardSolver
from .numcore import RngStream
from .problems import (
    BasketOptionParams,
    LocalVolParams,
    ProblemSpec,
    bs_closed_form,
    effective_volatility,
    hjb_reference,
    make_black_scholes,
    make_different_rates,
    make_hjb,
    make_local_vol,
)
from .sde import TimeGrid, simulate_paths
from .solver import SchemeConfig, SolveResult, solve_backward

__all__ = [
    "BackwardSolver",
    "BasketOptionParams",
    "LocalVolParams",
    "ProblemSpec",
    "RngStream",
    "SchemeConfig",
    "SolveResult",
    "TimeGrid",
    "bs_closed_form",
    "effective_volatility",
    "hjb_reference",
    "make_black_scholes",
    "make_different_rates",
    "make_hjb",
    "make_local_vol",
    "simulate_paths",
    "solve_backward",
    "__version__",
]
