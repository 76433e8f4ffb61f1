import numpy as np

from dlbsde.problems import ProblemSpec


def make_stub_problem(
    d=1,
    horizon=1.0,
    x0=0.0,
    drift_vec=None,
    drift_jac=None,
    diffusion_mat=None,
    driver=None,
    payoff=None,
    payoff_gradient=None,
    payoff_hessian=None,
    moments="analytic",
    exact_solution=None,
    name="stub",
):
    """Hand-built problem for unit tests; skips the construction self-check."""
    drift_vec = np.zeros(d) if drift_vec is None else np.asarray(drift_vec, float)
    drift_jac = np.zeros((d, d)) if drift_jac is None else np.asarray(drift_jac, float)
    diffusion_mat = np.eye(d) if diffusion_mat is None else np.asarray(diffusion_mat, float)
    diffusion_inv = np.linalg.inv(diffusion_mat)
    x0_vec = np.full(d, float(x0)) if np.ndim(x0) == 0 else np.asarray(x0, float)

    zero_driver = driver is None
    driver = driver or (lambda t, x, y, z: np.zeros(y.shape))
    payoff = payoff or (lambda x: x.sum(axis=1))
    payoff_gradient = payoff_gradient or (lambda x: np.ones_like(x))
    payoff_hessian = payoff_hessian or (lambda x: np.zeros((x.shape[0], d, d)))

    def analytic_moments(t):
        std = np.sqrt(np.sum(diffusion_mat**2, axis=1) * t)
        return x0_vec + drift_vec * t, std

    return ProblemSpec(
        name=name,
        dim=d,
        horizon=horizon,
        x0=x0_vec,
        drift=lambda t, x: np.broadcast_to(drift_vec, x.shape),
        drift_jacobian=lambda t, x: drift_jac,
        diffusion=lambda t: diffusion_mat,
        diffusion_inv=lambda t: diffusion_inv,
        driver=driver,
        driver_grad_x=lambda t, x, y, z: np.zeros_like(z),
        driver_grad_y=lambda t, x, y, z: np.zeros_like(y),
        driver_grad_z=lambda t, x, y, z: np.zeros_like(z),
        payoff=payoff,
        payoff_gradient=payoff_gradient,
        payoff_hessian=payoff_hessian,
        moments=analytic_moments if moments == "analytic" else None,
        exact_solution=exact_solution,
        ln_domain=False,
    )
