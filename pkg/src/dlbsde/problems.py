"""Benchmark BSDE definitions behind a single problem contract.

Each problem bundles the forward dynamics (drift, time-only diffusion and
its inverse), the driver with analytic partial derivatives, the terminal
payoff with gradient and Hessian, analytic state moments where available,
and a reference-solution hook.  Geometric models are constructed directly
in log-price coordinates so the diffusion is state independent; their
reference gamma is reported in the original price domain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import ndtr

from .numcore import RngStream, sample_standard_normals_block


class ProblemValidationError(ValueError):
    """A problem failed its construction-time self-check."""


@dataclass(frozen=True)
class ProblemSpec:
    """Coefficients and hooks describing one decoupled FBSDE."""

    name: str
    dim: int
    horizon: float
    x0: np.ndarray
    drift: Callable  # (t, x[B,d]) -> [B,d]
    drift_jacobian: Callable  # (t, x[d]) -> [d,d]; must not depend on x for solving
    diffusion: Callable  # t -> [d,d]
    diffusion_inv: Callable  # t -> [d,d]
    driver: Callable  # (t, x[B,d], y[B], z[B,d]) -> [B]
    driver_grad_x: Callable  # -> [B,d]
    driver_grad_y: Callable  # -> [B]
    driver_grad_z: Callable  # -> [B,d]
    payoff: Callable  # x[B,d] -> [B]
    payoff_gradient: Callable  # x[B,d] -> [B,d]
    payoff_hessian: Callable  # x[B,d] -> [B,d,d]
    moments: Optional[Callable] = None  # t -> (mean[d], std[d])
    exact_solution: Optional[Callable] = None  # (t, x[B,d]) -> (Y[B], Z[B,d], G[B,d,d])
    ln_domain: bool = False
    y0_reference: Optional[float] = None
    payoff_kink_distance: Optional[Callable] = None  # x[B,d] -> [B]
    driver_kink_distance: Optional[Callable] = None  # (t,x,y,z) -> [B]

    def terminal_gamma(self, x: np.ndarray) -> np.ndarray:
        """Jacobian of x -> payoff_gradient(x) @ b(T), shape (B, d, d)."""
        b = self.diffusion(self.horizon)
        hess = self.payoff_hessian(x)
        return np.einsum("mk,bml->bkl", b, hess)


# ---------------------------------------------------------------------------
# Construction-time self-checks.
# ---------------------------------------------------------------------------


def _probe_states(problem: ProblemSpec, stream: RngStream, count: int) -> np.ndarray:
    """States spread around the dynamics, kept clear of payoff kinks."""
    d = problem.dim
    if problem.moments is not None:
        mean, std = problem.moments(0.5 * problem.horizon)
    else:
        mean = np.asarray(problem.x0, float)
        std = 0.25 * np.abs(mean) + 0.25
    normals = sample_standard_normals_block(stream.child("probes"), np.arange(4 * count), d)
    states = mean + std * normals.reshape(4 * count, d)
    if problem.payoff_kink_distance is not None:
        states = states[problem.payoff_kink_distance(states) > 1e-3]
    return states[:count]


def validate_problem(problem: ProblemSpec, probes: int = 12, rtol: float = 1e-6) -> None:
    """Check diffusion invertibility and all analytic derivatives against
    central finite differences; raises ProblemValidationError on failure."""
    stream = RngStream(seed=0xD1F).child(problem.name)
    times = [k * problem.horizon / 4 for k in range(4)]
    d = problem.dim
    for t in times:
        b = problem.diffusion(t)
        gap = np.abs(problem.diffusion_inv(t) @ b - np.eye(d)).max()
        if gap > 1e-12:
            raise ProblemValidationError(f"b_inv(t) b(t) != I at t={t} (gap {gap:.2e})")

    x = _probe_states(problem, stream, probes)
    if x.shape[0] == 0:
        raise ProblemValidationError("no kink-free probe states found")
    n = x.shape[0]
    y = 1.0 + 0.1 * sample_standard_normals_block(stream.child("y"), np.arange(n), 1)[:, 0]
    z = 0.5 * sample_standard_normals_block(stream.child("z"), np.arange(n), d)
    if problem.driver_kink_distance is not None:
        keep = problem.driver_kink_distance(0.5 * problem.horizon, x, y, z) > 1e-3
        x, y, z = x[keep], y[keep], z[keep]
        if x.shape[0] == 0:
            raise ProblemValidationError("no driver-kink-free probes found")
    t_mid = 0.5 * problem.horizon

    def _rel(a, b_):
        # unit-floored relative error so exact zeros and roundoff noise pass
        return np.abs(a - b_) / (1.0 + np.maximum(np.abs(a), np.abs(b_)))

    # driver partials vs central differences
    h = 1e-6
    fd_x = np.empty_like(z)
    for k in range(d):
        e = np.zeros(d)
        e[k] = h
        fd_x[:, k] = (problem.driver(t_mid, x + e, y, z) - problem.driver(t_mid, x - e, y, z)) / (2 * h)
    fd_y = (problem.driver(t_mid, x, y + h, z) - problem.driver(t_mid, x, y - h, z)) / (2 * h)
    fd_z = np.empty_like(z)
    for k in range(d):
        e = np.zeros(d)
        e[k] = h
        fd_z[:, k] = (problem.driver(t_mid, x, y, z + e) - problem.driver(t_mid, x, y, z - e)) / (2 * h)
    checks = [
        ("grad_x f", problem.driver_grad_x(t_mid, x, y, z), fd_x),
        ("grad_y f", problem.driver_grad_y(t_mid, x, y, z), fd_y),
        ("grad_z f", problem.driver_grad_z(t_mid, x, y, z), fd_z),
    ]
    for label, analytic, numeric in checks:
        err = _rel(np.asarray(analytic, float), numeric).max()
        if err > rtol:
            raise ProblemValidationError(f"{label} disagrees with finite differences ({err:.2e})")

    # payoff gradient / Hessian vs central differences, away from kinks
    hg = 1e-6 * np.maximum(1.0, np.abs(x).max())
    fd_grad = np.empty_like(x)
    for k in range(d):
        e = np.zeros(d)
        e[k] = hg
        fd_grad[:, k] = (problem.payoff(x + e) - problem.payoff(x - e)) / (2 * hg)
    err = _rel(problem.payoff_gradient(x), fd_grad).max()
    if err > rtol:
        raise ProblemValidationError(f"payoff gradient disagrees with finite differences ({err:.2e})")

    hh = 1e-4 * np.maximum(1.0, np.abs(x).max())
    fd_hess = np.empty((x.shape[0], d, d))
    for k in range(d):
        e = np.zeros(d)
        e[k] = hh
        fd_hess[:, :, k] = (problem.payoff_gradient(x + e) - problem.payoff_gradient(x - e)) / (2 * hh)
    err = _rel(problem.payoff_hessian(x), fd_hess).max()
    if err > 10 * rtol:
        raise ProblemValidationError(f"payoff Hessian disagrees with finite differences ({err:.2e})")


# ---------------------------------------------------------------------------
# Basket-call closed form (log-coordinate states).
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BasketOptionParams:
    """Parameters of the geometric basket call used by the closed form."""

    dim: int
    horizon: float
    strike: float
    rate: float
    growth: np.ndarray  # per-asset expected return, shape (d,)
    vol: np.ndarray  # per-asset volatility, shape (d,)
    weights: np.ndarray  # basket exponents, sum to 1
    dividend: np.ndarray  # per-asset dividend yield
    spot: np.ndarray  # initial prices, shape (d,)


def _per_asset(value, d: int) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(d, float(arr))
    if arr.shape != (d,):
        raise ValueError(f"expected scalar or length-{d} vector, got shape {arr.shape}")
    return arr


def make_basket_params(
    d: int,
    spot=100.0,
    growth=0.05,
    vol=0.2,
    rate=0.03,
    weights=None,
    dividend=0.0,
    strike=100.0,
    horizon=1.0,
) -> BasketOptionParams:
    weights = np.full(d, 1.0 / d) if weights is None else _per_asset(weights, d)
    return BasketOptionParams(
        dim=d,
        horizon=float(horizon),
        strike=float(strike),
        rate=float(rate),
        growth=_per_asset(growth, d),
        vol=_per_asset(vol, d),
        weights=weights,
        dividend=_per_asset(dividend, d),
        spot=_per_asset(spot, d),
    )


def _norm_pdf(x):
    return np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def _basket_call_closed_form(t, x_ln, params: BasketOptionParams, pricing_vol, z_vol):
    """Price, delta-hedge row, and gamma of the weighted geometric basket call.

    ``pricing_vol`` enters the distributional part (d1/d2 and the adjusted
    dividend), ``z_vol`` is the diffusion applied to the spatial gradient;
    they coincide for constant volatility and differ for local volatility.
    Returns (Y[B], Z[B,d], gamma_ln[B,d,d], gamma_orig[B,d,d]).
    """
    x_ln = np.atleast_2d(np.asarray(x_ln, dtype=np.float64))
    c = params.weights
    k_strike = params.strike
    tau = params.horizon - t
    pricing_vol = _per_asset(pricing_vol, params.dim)
    z_vol = _per_asset(z_vol, params.dim)
    log_basket = x_ln @ c
    basket = np.exp(log_basket)
    if tau <= 0:
        ind = (log_basket > math.log(k_strike)).astype(float)
        y = np.where(ind > 0, basket - k_strike, 0.0)
        zmat = ind[:, None] * basket[:, None] * (c * z_vol)[None, :]
        gamma_ln = (ind * basket)[:, None, None] * np.einsum("i,j->ij", c * z_vol, c)[None, :, :]
    else:
        b_check = math.sqrt(float(np.sum((pricing_vol * c) ** 2)))
        delta_check = float(np.sum(c * (params.dividend + 0.5 * pricing_vol**2))) - 0.5 * b_check**2
        sq = b_check * math.sqrt(tau)
        d1 = (np.log(basket / k_strike) + (params.rate - delta_check + 0.5 * b_check**2) * tau) / sq
        d2 = d1 - sq
        disc_div = math.exp(-delta_check * tau)
        disc_rate = math.exp(-params.rate * tau)
        y = disc_div * basket * ndtr(d1) - disc_rate * k_strike * ndtr(d2)
        zmat = (disc_div * basket * ndtr(d1))[:, None] * (c * z_vol)[None, :]
        shape_factor = disc_div * basket * (ndtr(d1) + _norm_pdf(d1) / sq)
        gamma_ln = shape_factor[:, None, None] * np.einsum("i,j->ij", c * z_vol, c)[None, :, :]
    gamma_orig = gamma_ln / np.exp(x_ln)[:, None, :]
    return y, zmat, gamma_ln, gamma_orig


def bs_closed_form(t, x_ln, params: BasketOptionParams, domain: str = "original"):
    """Reference (Y, Z, Gamma) of the basket call at log-states ``x_ln``."""
    if domain not in ("original", "ln"):
        raise ValueError("domain must be 'original' or 'ln'")
    y, z, g_ln, g_orig = _basket_call_closed_form(t, x_ln, params, params.vol, params.vol)
    return y, z, (g_ln if domain == "ln" else g_orig)


# ---------------------------------------------------------------------------
# Benchmark 1: geometric basket call under a single rate (linear driver).
# ---------------------------------------------------------------------------


def _basket_payoff_functions(weights: np.ndarray, strike: float):
    c = weights
    log_strike = math.log(strike)

    # the in/out-of-the-money test lives in log space so a state placed
    # exactly on the kink is classified as "at the kink" (value/gradient 0)
    def payoff(x):
        log_basket = x @ c
        return np.where(log_basket > log_strike, np.exp(log_basket) - strike, 0.0)

    def gradient(x):
        log_basket = x @ c
        coef = np.where(log_basket > log_strike, np.exp(log_basket), 0.0)
        return coef[:, None] * c[None, :]

    def hessian(x):
        log_basket = x @ c
        coef = np.where(log_basket > log_strike, np.exp(log_basket), 0.0)
        outer = np.einsum("i,j->ij", c, c)
        return coef[:, None, None] * outer[None, :, :]

    def kink_distance(x):
        return np.abs(x @ c - log_strike)

    return payoff, gradient, hessian, kink_distance


def make_black_scholes(d: int, validate: bool = True, **kwargs) -> ProblemSpec:
    """Geometric-Brownian basket call in log coordinates, linear driver."""
    p = make_basket_params(d, **kwargs)
    if np.any(p.vol <= 0):
        raise ValueError("volatilities must be positive")
    drift_vec = p.growth - 0.5 * p.vol**2
    b_mat = np.diag(p.vol)
    b_inv = np.diag(1.0 / p.vol)
    z_coef = (p.growth - p.rate + p.dividend) / p.vol
    rate = p.rate
    payoff, gradient, hessian, kink = _basket_payoff_functions(p.weights, p.strike)
    x0 = np.log(p.spot)

    def moments(t):
        return x0 + drift_vec * t, p.vol * math.sqrt(t)

    def exact(t, x):
        y, z, _, g_orig = _basket_call_closed_form(t, x, p, p.vol, p.vol)
        return y, z, g_orig

    spec = ProblemSpec(
        name=f"black-scholes-d{d}",
        dim=d,
        horizon=p.horizon,
        x0=x0,
        drift=lambda t, x: np.broadcast_to(drift_vec, x.shape),
        drift_jacobian=lambda t, x: np.zeros((d, d)),
        diffusion=lambda t: b_mat,
        diffusion_inv=lambda t: b_inv,
        driver=lambda t, x, y, z: -(rate * y + z @ z_coef),
        driver_grad_x=lambda t, x, y, z: np.zeros_like(z),
        driver_grad_y=lambda t, x, y, z: np.full(y.shape, -rate),
        driver_grad_z=lambda t, x, y, z: np.broadcast_to(-z_coef, z.shape),
        payoff=payoff,
        payoff_gradient=gradient,
        payoff_hessian=hessian,
        moments=moments,
        exact_solution=exact,
        ln_domain=True,
        payoff_kink_distance=kink,
    )
    if validate:
        validate_problem(spec)
    return spec


# ---------------------------------------------------------------------------
# Benchmark 2: different lending/borrowing rates (nonlinear driver).
# ---------------------------------------------------------------------------


def _max_call_spread_payoff(strike_low: float, strike_high: float):
    log_low, log_high = math.log(strike_low), math.log(strike_high)

    def payoff(x):
        log_m = x.max(axis=1)
        m = np.exp(log_m)
        low_leg = np.where(log_m > log_low, m - strike_low, 0.0)
        high_leg = np.where(log_m > log_high, m - strike_high, 0.0)
        return low_leg - 2.0 * high_leg

    def _coef(log_m):
        return ((log_m > log_low).astype(float) - 2.0 * (log_m > log_high)) * np.exp(log_m)

    def gradient(x):
        b, d = x.shape
        arg = x.argmax(axis=1)
        out = np.zeros((b, d))
        out[np.arange(b), arg] = _coef(x[np.arange(b), arg])
        return out

    def hessian(x):
        b, d = x.shape
        arg = x.argmax(axis=1)
        out = np.zeros((b, d, d))
        out[np.arange(b), arg, arg] = _coef(x[np.arange(b), arg])
        return out

    def kink_distance(x):
        xs = np.sort(x, axis=1)
        xmax = xs[:, -1]
        dist = np.minimum(np.abs(xmax - math.log(strike_low)), np.abs(xmax - math.log(strike_high)))
        if x.shape[1] > 1:
            dist = np.minimum(dist, xmax - xs[:, -2])  # argmax tie is a gradient kink
        return dist

    return payoff, gradient, hessian, kink_distance


def make_different_rates(
    d: int,
    payoff_kind: str = "call",
    spot=100.0,
    growth=0.06,
    vol=0.2,
    rate_lend=0.04,
    rate_borrow=0.06,
    strike=100.0,
    strike_low=120.0,
    strike_high=150.0,
    horizon=0.5,
    y0_reference: Optional[float] = None,
    validate: bool = True,
) -> ProblemSpec:
    """Option pricing with distinct lending/borrowing rates, in log coordinates."""
    if rate_borrow < rate_lend:
        raise ValueError("borrowing rate must not be below the lending rate")
    a = float(growth)
    b = float(vol)
    if b <= 0:
        raise ValueError("volatility must be positive")
    r1, r2 = float(rate_lend), float(rate_borrow)
    spread = r2 - r1

    if payoff_kind == "call":
        if d != 1:
            raise ValueError("the plain call payoff is wired for d=1 only")
        payoff, gradient, hessian, kink = _basket_payoff_functions(np.ones(1), strike)
        p_ref = make_basket_params(1, spot=spot, growth=a, vol=b, rate=r2, strike=strike, horizon=horizon)

        def exact(t, x):
            # borrowing-rate linear problem: the nonlinearity is active on calls
            y, z, _, g_orig = _basket_call_closed_form(t, x, p_ref, p_ref.vol, p_ref.vol)
            return y, z, g_orig

    elif payoff_kind == "max-call-spread":
        payoff, gradient, hessian, kink = _max_call_spread_payoff(strike_low, strike_high)
        exact = None
    else:
        raise ValueError(f"unknown payoff_kind {payoff_kind!r}")

    drift_vec = np.full(d, a - 0.5 * b * b)
    x0 = np.log(_per_asset(spot, d))

    def driver(t, x, y, z):
        s = z.sum(axis=1)
        return -r1 * y - ((a - r1) / b) * s + spread * np.maximum(s / b - y, 0.0)

    def active(y, z):
        return (z.sum(axis=1) / b - y > 0).astype(float)

    def grad_y(t, x, y, z):
        return -r1 - spread * active(y, z)

    def grad_z(t, x, y, z):
        g = -(a - r1) / b + (spread / b) * active(y, z)
        return np.repeat(g[:, None], d, axis=1)

    spec = ProblemSpec(
        name=f"different-rates-{payoff_kind}-d{d}",
        dim=d,
        horizon=float(horizon),
        x0=x0,
        drift=lambda t, x: np.broadcast_to(drift_vec, x.shape),
        drift_jacobian=lambda t, x: np.zeros((d, d)),
        diffusion=lambda t: b * np.eye(d),
        diffusion_inv=lambda t: (1.0 / b) * np.eye(d),
        driver=driver,
        driver_grad_x=lambda t, x, y, z: np.zeros_like(z),
        driver_grad_y=grad_y,
        driver_grad_z=grad_z,
        payoff=payoff,
        payoff_gradient=gradient,
        payoff_hessian=hessian,
        moments=lambda t: (x0 + drift_vec * t, np.full(d, b * math.sqrt(t))),
        exact_solution=exact,
        ln_domain=True,
        y0_reference=y0_reference,
        payoff_kink_distance=kink,
        driver_kink_distance=lambda t, x, y, z: np.abs(z.sum(axis=1) / b - y),
    )
    if validate:
        validate_problem(spec)
    return spec


# ---------------------------------------------------------------------------
# Benchmark 3: control problem with quadratic gradient driver.
# ---------------------------------------------------------------------------


def make_hjb(d: int, horizon=0.5, x0=1.0, diffusion_scale=math.sqrt(0.2), validate: bool = True) -> ProblemSpec:
    """Driftless arithmetic dynamics with the quadratic-in-gradient driver."""
    b = float(diffusion_scale)
    x0_vec = _per_asset(x0, d)

    def payoff(x):
        return np.log(0.5 * (1.0 + np.sum(x * x, axis=1)))

    def gradient(x):
        denom = 1.0 + np.sum(x * x, axis=1)
        return 2.0 * x / denom[:, None]

    def hessian(x):
        denom = 1.0 + np.sum(x * x, axis=1)
        eye = np.eye(x.shape[1])
        outer = np.einsum("bi,bj->bij", x, x)
        return 2.0 * eye[None, :, :] / denom[:, None, None] - 4.0 * outer / (denom**2)[:, None, None]

    spec = ProblemSpec(
        name=f"hjb-d{d}",
        dim=d,
        horizon=float(horizon),
        x0=x0_vec,
        drift=lambda t, x: np.zeros_like(x),
        drift_jacobian=lambda t, x: np.zeros((d, d)),
        diffusion=lambda t: b * np.eye(d),
        diffusion_inv=lambda t: (1.0 / b) * np.eye(d),
        driver=lambda t, x, y, z: -np.sum(z * z, axis=1) / (b * b),
        driver_grad_x=lambda t, x, y, z: np.zeros_like(z),
        driver_grad_y=lambda t, x, y, z: np.zeros_like(y),
        driver_grad_z=lambda t, x, y, z: -2.0 * z / (b * b),
        payoff=payoff,
        payoff_gradient=gradient,
        payoff_hessian=hessian,
        moments=lambda t: (x0_vec.copy(), np.full(d, b * math.sqrt(t))),
        exact_solution=None,
        ln_domain=False,
    )
    if validate:
        validate_problem(spec)
    return spec


def hjb_reference(
    d: int,
    sample_count: int,
    stream: RngStream,
    horizon: float = 0.5,
    x0=1.0,
    diffusion_scale: float = math.sqrt(0.2),
    chunk: int = 200_000,
):
    """Monte-Carlo semi-explicit solution triple at t=0.

    The quadratic-gradient driver -|z|^2 / b^2 linearizes under the
    exponential change of variables with lam = 2 / b^2:

        Y0 = -(1/lam) ln E[exp(-lam g(x0 + b W_T))]

    (for b = sqrt(2) this is the plain -ln E[exp(-g)] form quoted in the
    deep-BSDE literature).  Differentiating the estimator in the initial
    state gives, with m = E[e^{-lam g}],

        grad u = E[e^{-lam g} grad g] / m,
        Hess u = E[e^{-lam g} (Hess g - lam grad g^T grad g)] / m
                 + lam grad u^T grad u,

    and the reported pair is Z0 = grad u * b, Gamma0 = Hess u * b.  Returns
    (y0, z0[d], gamma0[d,d], standard_error_of_y0).
    """
    if sample_count < 10_000:
        raise ValueError("sample_count too small for a stable reference")
    b = float(diffusion_scale)
    lam = 2.0 / (b * b)
    x0_vec = _per_asset(x0, d)
    scale = b * math.sqrt(horizon)

    total_w = 0.0
    total_w2 = 0.0
    total_wg = np.zeros(d)
    total_wh = np.zeros((d, d))
    done = 0
    chunk_index = 0
    while done < sample_count:
        m = min(chunk, sample_count - done)
        normals = sample_standard_normals_block(
            stream.child("chunk", chunk_index), np.arange(m), d
        )
        x = x0_vec + scale * normals
        sq = 1.0 + np.sum(x * x, axis=1)
        g = np.log(0.5 * sq)
        grad = 2.0 * x / sq[:, None]
        w = np.exp(-lam * g)
        total_w += w.sum()
        total_w2 += float(np.sum(w * w))
        total_wg += (w[:, None] * grad).sum(axis=0)
        hess = (
            2.0 * np.eye(d)[None, :, :] / sq[:, None, None]
            - 4.0 * np.einsum("bi,bj->bij", x, x) / (sq**2)[:, None, None]
        )
        total_wh += np.einsum("b,bij->ij", w, hess - lam * np.einsum("bi,bj->bij", grad, grad))
        done += m
        chunk_index += 1

    mean_w = total_w / sample_count
    y0 = -math.log(mean_w) / lam
    grad_u = total_wg / total_w
    hess_u = total_wh / total_w + lam * np.outer(grad_u, grad_u)
    z0 = grad_u * b
    gamma0 = hess_u * b
    var_w = total_w2 / sample_count - mean_w**2
    se_y0 = math.sqrt(max(var_w, 0.0) / sample_count) / (lam * mean_w)
    return y0, z0, gamma0, se_y0


# ---------------------------------------------------------------------------
# Benchmark 4: time-dependent (local) volatility.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LocalVolParams:
    a0: float = 0.2
    a1: float = 0.1
    a2: float = 0.02
    b0: float = 0.25
    b1: float = 0.125
    b2: float = 0.025
    period1: float = 1.0
    period2: float = 0.25
    horizon: float = 0.25

    @property
    def w1(self) -> float:
        return 2.0 * math.pi / self.period1

    @property
    def w2(self) -> float:
        return 2.0 * math.pi / self.period2

    def drift_at(self, t):
        return self.a0 + self.a1 * np.sin(self.w1 * t) + self.a2 * np.sin(self.w2 * t)

    def vol_at(self, t):
        return self.b0 + self.b1 * np.sin(self.w1 * t) + self.b2 * np.sin(self.w2 * t)


def _int_sin(w, s):
    return -np.cos(w * s) / w


def _int_sin_sq(w, s):
    return 0.5 * s - np.sin(2.0 * w * s) / (4.0 * w)


def _int_sin_sin(w1, w2, s):
    if abs(w1 - w2) < 1e-12:
        return _int_sin_sq(w1, s)
    return np.sin((w1 - w2) * s) / (2.0 * (w1 - w2)) - np.sin((w1 + w2) * s) / (2.0 * (w1 + w2))


def _vol_sq_antiderivative(p: LocalVolParams, s):
    """Antiderivative of b(s)^2 expanded over the sinusoidal terms."""
    return (
        p.b0**2 * s
        + p.b1**2 * _int_sin_sq(p.w1, s)
        + p.b2**2 * _int_sin_sq(p.w2, s)
        + 2.0 * p.b0 * p.b1 * _int_sin(p.w1, s)
        + 2.0 * p.b0 * p.b2 * _int_sin(p.w2, s)
        + 2.0 * p.b1 * p.b2 * _int_sin_sin(p.w1, p.w2, s)
    )


def _drift_antiderivative(p: LocalVolParams, s):
    return p.a0 * s + p.a1 * _int_sin(p.w1, s) + p.a2 * _int_sin(p.w2, s)


def integrated_variance(p: LocalVolParams, t0, t1):
    return _vol_sq_antiderivative(p, t1) - _vol_sq_antiderivative(p, t0)


def effective_volatility(t: float, p: LocalVolParams) -> float:
    """Root-mean-square volatility over [t, T]."""
    if t >= p.horizon:
        raise ValueError(f"t={t} must lie strictly below the horizon {p.horizon}")
    return math.sqrt(integrated_variance(p, t, p.horizon) / (p.horizon - t))


def make_local_vol(
    d: int = 50,
    spot=100.0,
    strike=100.0,
    rate=0.1,
    dividend=0.0,
    weights=None,
    params: LocalVolParams = LocalVolParams(),
    validate: bool = True,
) -> ProblemSpec:
    """Basket call with sinusoidal time-dependent drift and volatility."""
    p = params
    grid = np.linspace(0.0, p.horizon, 10_001)
    if np.any(p.vol_at(grid) <= 0):
        raise ValueError("volatility must stay positive on [0, T]")
    c = np.full(d, 1.0 / d) if weights is None else _per_asset(weights, d)
    delta = _per_asset(dividend, d)
    rate = float(rate)
    payoff, gradient, hessian, kink = _basket_payoff_functions(c, strike)
    x0 = np.log(_per_asset(spot, d))

    def drift(t, x):
        return np.full_like(x, p.drift_at(t) - 0.5 * p.vol_at(t) ** 2)

    def driver(t, x, y, z):
        coef = (p.drift_at(t) - rate + delta) / p.vol_at(t)
        return -(rate * y + z @ coef)

    def grad_z(t, x, y, z):
        coef = (p.drift_at(t) - rate + delta) / p.vol_at(t)
        return np.broadcast_to(-coef, z.shape).copy()

    def moments(t):
        mean = x0 + (_drift_antiderivative(p, t) - _drift_antiderivative(p, 0.0)) - 0.5 * integrated_variance(p, 0.0, t)
        std = math.sqrt(integrated_variance(p, 0.0, t))
        return mean, np.full(d, std)

    bop = BasketOptionParams(
        dim=d,
        horizon=p.horizon,
        strike=float(strike),
        rate=rate,
        growth=np.full(d, p.a0),
        vol=np.full(d, p.b0),
        weights=c,
        dividend=delta,
        spot=_per_asset(spot, d),
    )

    def exact(t, x):
        if t >= p.horizon:
            vol_t = np.full(d, float(p.vol_at(p.horizon)))
            y, z, _, g = _basket_call_closed_form(t, x, bop, vol_t, vol_t)
            return y, z, g
        bbar = effective_volatility(t, p)
        y, z, _, g = _basket_call_closed_form(
            t, x, bop, np.full(d, bbar), np.full(d, float(p.vol_at(t)))
        )
        return y, z, g

    spec = ProblemSpec(
        name=f"local-vol-d{d}",
        dim=d,
        horizon=p.horizon,
        x0=x0,
        drift=drift,
        drift_jacobian=lambda t, x: np.zeros((d, d)),
        diffusion=lambda t: float(p.vol_at(t)) * np.eye(d),
        diffusion_inv=lambda t: (1.0 / float(p.vol_at(t))) * np.eye(d),
        driver=driver,
        driver_grad_x=lambda t, x, y, z: np.zeros_like(z),
        driver_grad_y=lambda t, x, y, z: np.full(y.shape, -rate),
        driver_grad_z=grad_z,
        payoff=payoff,
        payoff_gradient=gradient,
        payoff_hessian=hessian,
        moments=moments,
        exact_solution=exact,
        ln_domain=True,
        payoff_kink_distance=kink,
    )
    if validate:
        validate_problem(spec)
    return spec
