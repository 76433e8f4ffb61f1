"""Backward training engine for the solution triple (Y, Z, Gamma).

Time runs backward from the terminal payoff.  At each grid point three
networks regress the value, its diffusion-scaled gradient, and the
gradient's Jacobian by minimizing a weighted two-term residual loss: the
value dynamics of the discretized backward equation plus the dynamics of
its pathwise (Malliavin) derivative.  Setting the weights to (1, 0) and
dropping the Jacobian network recovers the baseline scheme, whose gamma is
then obtained by differentiating the gradient network.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import neural
from .neural import (
    INTERIOR_SCHEDULE,
    TERMINAL_SCHEDULE,
    AdamState,
    LrSchedule,
    Mlp,
    adam_init,
    adam_step,
    forward_trace,
    input_jacobian,
    lr_at,
    mlp_init,
    vjp_params_from_trace,
)
from .numcore import RngStream
from .problems import ProblemSpec
from .sde import NormalizationStats, TimeGrid, normalization_stats, simulate_paths

SCHEMES = ("dlbdp", "dbdp")


class DivergenceError(RuntimeError):
    """Training loss became non-finite or exceeded the guard threshold."""


@dataclass(frozen=True)
class SchemeConfig:
    """Hyperparameters of one backward solve."""

    scheme: str = "dlbdp"
    n_steps: int = 8
    batch_size: int = 1024
    terminal_steps: int = 24000
    interior_steps: int = 10000
    hidden_layers: int = 2
    hidden_width: Optional[int] = None  # defaults to 100 + d
    omega1: Optional[float] = None  # defaults: 1/(d+1) for dlbdp, 1 for dbdp
    omega2: Optional[float] = None
    seed: int = 0
    test_batch_size: int = 1024
    terminal_schedule: LrSchedule = TERMINAL_SCHEDULE
    interior_schedule: LrSchedule = INTERIOR_SCHEDULE
    loss_guard: float = 1e8

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if self.scheme == "dbdp":
            if self.omega1 not in (None, 1.0) or self.omega2 not in (None, 0.0):
                raise ValueError("the baseline scheme fixes the loss weights to (1, 0)")
        if self.omega1 is not None and self.omega2 is not None:
            if abs(self.omega1 + self.omega2 - 1.0) > 1e-12:
                raise ValueError("loss weights must sum to one")

    def resolved_weights(self, dim: int):
        if self.scheme == "dbdp":
            return 1.0, 0.0
        if self.omega1 is not None and self.omega2 is not None:
            return float(self.omega1), float(self.omega2)
        if self.omega1 is not None:
            return float(self.omega1), 1.0 - float(self.omega1)
        if self.omega2 is not None:
            return 1.0 - float(self.omega2), float(self.omega2)
        return 1.0 / (dim + 1.0), dim / (dim + 1.0)

    def resolved_width(self, dim: int) -> int:
        return self.hidden_width if self.hidden_width is not None else 100 + dim

    def schedule_for(self, terminal: bool) -> LrSchedule:
        if terminal:
            return self.terminal_schedule.rescaled(self.terminal_steps)
        return self.interior_schedule.rescaled(self.interior_steps)


@dataclass
class TimestepNets:
    """Trained networks and optimizer state at one time index."""

    index: int
    time: float
    phi_y: Mlp
    phi_z: Mlp
    phi_gamma: Optional[Mlp]
    adam_y: AdamState
    adam_z: AdamState
    adam_gamma: Optional[AdamState]
    stats: NormalizationStats
    final_loss: float = float("nan")

    @property
    def dim(self) -> int:
        return self.phi_y.d0

    def inputs(self, x: np.ndarray) -> np.ndarray:
        return self.stats.apply(x)

    def evaluate(self, x: np.ndarray):
        """(Y, Z, Gamma) estimates at raw states ``x``; gamma is None for the
        baseline networks (use ``gamma_from_gradient_net`` instead)."""
        xin = self.inputs(x)
        y = neural.mlp_forward(self.phi_y, xin)[:, 0]
        z = neural.mlp_forward(self.phi_z, xin)
        g = None
        if self.phi_gamma is not None:
            d = self.dim
            g = neural.mlp_forward(self.phi_gamma, xin).reshape(-1, d, d)
        return y, z, g

    def gamma_from_gradient_net(self, x: np.ndarray) -> np.ndarray:
        """Baseline gamma: Jacobian of the z-network in raw coordinates.

        The networks see normalized inputs, so the Jacobian picks up a 1/std
        factor per input column (identity at t=0 where inputs are raw).
        """
        xin = self.inputs(x)
        jac = input_jacobian(self.phi_z, xin)
        if not self.stats.degenerate:
            jac = jac / self.stats.std[None, None, :]
        return jac


@dataclass
class SolveResult:
    """Backward sweep output evaluated on a held-out test batch."""

    config: SchemeConfig
    problem_name: str
    grid: TimeGrid
    nets: list  # TimestepNets for n = 0..N-1
    test_states: np.ndarray  # (B_test, N+1, d)
    y_estimates: np.ndarray  # (N, B_test)
    z_estimates: np.ndarray  # (N, B_test, d)
    gamma_estimates: np.ndarray  # (N, B_test, d, d), problem-domain values
    loss_curves: list  # per-n arrays of training losses
    step_runtimes: list  # per-n wall-clock seconds
    normalization_fallback: bool = False


@dataclass
class StepBatch:
    """One training batch at a fixed time index with frozen targets."""

    t: float
    dt: float
    x: np.ndarray  # (B, d) raw states at t_n
    x_in: np.ndarray  # normalized network inputs
    dw: np.ndarray  # (B, d) Brownian increment over [t_n, t_{n+1}]
    d_now: np.ndarray  # (d, d): D_n X_n
    d_next: np.ndarray  # (d, d): D_n X_{n+1}
    b_inv_next: np.ndarray  # (d, d): diffusion inverse at t_{n+1}
    y_next: np.ndarray  # (B,) frozen value targets
    z_next: np.ndarray  # (B, d) frozen gradient targets


def terminal_triple(problem: ProblemSpec, x_terminal: np.ndarray):
    """Exact terminal (Y_N, Z_N, Gamma_N) from the payoff and its derivatives."""
    x = np.atleast_2d(np.asarray(x_terminal, dtype=np.float64))
    y = problem.payoff(x)
    z = problem.payoff_gradient(x) @ problem.diffusion(problem.horizon)
    return y, z, problem.terminal_gamma(x)


def f_D_eval(problem: ProblemSpec, t, x, y, z, gamma, d_now) -> np.ndarray:
    """Driver of the derivative equation: grad_x f . DX + grad_y f . z
    + grad_z f . (Gamma DX), one row per sample."""
    gx = problem.driver_grad_x(t, x, y, z)
    gy = problem.driver_grad_y(t, x, y, z)
    gz = problem.driver_grad_z(t, x, y, z)
    gamma_d = gamma @ d_now
    return gx @ d_now + gy[:, None] * z + np.einsum("bi,bij->bj", gz, gamma_d)


def _forward_outputs(nets: TimestepNets, batch: StepBatch):
    y_out, trace_y = forward_trace(nets.phi_y, batch.x_in)
    z_out, trace_z = forward_trace(nets.phi_z, batch.x_in)
    if nets.phi_gamma is not None:
        g_flat, trace_g = forward_trace(nets.phi_gamma, batch.x_in)
        d = nets.dim
        g_out = g_flat.reshape(-1, d, d)
    else:
        g_out, trace_g = None, None
    return y_out[:, 0], z_out, g_out, trace_y, trace_z, trace_g


def _residual_y(problem, batch: StepBatch, y_out, z_out):
    f_val = problem.driver(batch.t, batch.x, y_out, z_out)
    r = batch.y_next - y_out + f_val * batch.dt - np.sum(z_out * batch.dw, axis=1)
    return r, f_val


def _residual_z(problem, batch: StepBatch, y_out, z_out, g_out):
    f_d = f_D_eval(problem, batch.t, batch.x, y_out, z_out, g_out, batch.d_now)
    transported = np.einsum("bj,jk->bk", batch.z_next @ batch.b_inv_next, batch.d_next)
    martingale = np.einsum("bij,bj->bi", g_out @ batch.d_now, batch.dw)
    return transported - z_out + f_d * batch.dt - martingale


def residual_y(nets: TimestepNets, problem: ProblemSpec, batch: StepBatch) -> np.ndarray:
    """Per-sample value-dynamics residual."""
    y_out, z_out, _, _, _, _ = _forward_outputs(nets, batch)
    return _residual_y(problem, batch, y_out, z_out)[0]


def residual_z(nets: TimestepNets, problem: ProblemSpec, batch: StepBatch) -> np.ndarray:
    """Per-sample gradient-dynamics residual row."""
    if nets.phi_gamma is None:
        raise ValueError("gradient-dynamics residual needs the gamma network")
    y_out, z_out, g_out, _, _, _ = _forward_outputs(nets, batch)
    return _residual_z(problem, batch, y_out, z_out, g_out)


def loss_and_grads(
    nets: TimestepNets,
    omega1: float,
    omega2: float,
    problem: ProblemSpec,
    batch: StepBatch,
    loss_guard: float = 1e8,
    step_label: str = "",
):
    """Weighted residual loss and parameter gradients for all networks.

    The gradient treats the driver partials inside the derivative driver as
    locally constant coefficients: residuals are first-order expressions and
    no second derivative of the driver is propagated.
    """
    y_out, z_out, g_out, trace_y, trace_z, trace_g = _forward_outputs(nets, batch)
    b = y_out.shape[0]
    t, dt = batch.t, batch.dt

    r_y, _ = _residual_y(problem, batch, y_out, z_out)
    gy = problem.driver_grad_y(t, batch.x, y_out, z_out)
    gz = problem.driver_grad_z(t, batch.x, y_out, z_out)
    loss = omega1 * float(np.mean(r_y**2))

    # pull-back seeds on the network outputs
    u_y = (2.0 * omega1 / b) * r_y * (gy * dt - 1.0)
    u_z = (2.0 * omega1 / b) * r_y[:, None] * (gz * dt - batch.dw)
    u_g = None

    if omega2 != 0.0:
        r_z = _residual_z(problem, batch, y_out, z_out, g_out)
        loss += omega2 * float(np.mean(np.sum(r_z**2, axis=1)))
        u_z = u_z + (2.0 * omega2 / b) * (gy[:, None] * dt - 1.0) * r_z
        w_tilde = np.einsum("jk,bk->bj", batch.d_now, batch.dw)
        r_d = np.einsum("qk,bk->bq", batch.d_now, r_z)
        u_g = (2.0 * omega2 / b) * (
            dt * np.einsum("bp,bq->bpq", gz, r_d) - np.einsum("bp,bq->bpq", r_z, w_tilde)
        )

    if not np.isfinite(loss) or loss > loss_guard:
        raise DivergenceError(
            f"training loss {loss!r} out of bounds at t={t:.6g} {step_label}".rstrip()
        )

    grads_y = vjp_params_from_trace(nets.phi_y, trace_y, u_y[:, None])
    grads_z = vjp_params_from_trace(nets.phi_z, trace_z, u_z)
    grads_g = None
    if u_g is not None:
        grads_g = vjp_params_from_trace(nets.phi_gamma, trace_g, u_g.reshape(b, -1))
    return loss, grads_y, grads_z, grads_g


def _init_nets(config: SchemeConfig, problem: ProblemSpec, n: int, t: float,
               stats: NormalizationStats, stream: RngStream) -> TimestepNets:
    d = problem.dim
    width = config.resolved_width(d)
    layers = config.hidden_layers
    phi_y = mlp_init(d, 1, layers, width, stream.child("init", n, "y"))
    phi_z = mlp_init(d, d, layers, width, stream.child("init", n, "z"))
    phi_gamma = None
    adam_gamma = None
    if config.scheme != "dbdp":
        phi_gamma = mlp_init(d, d * d, layers, width, stream.child("init", n, "gamma"))
        adam_gamma = adam_init(phi_gamma.params())
    return TimestepNets(
        index=n,
        time=t,
        phi_y=phi_y,
        phi_z=phi_z,
        phi_gamma=phi_gamma,
        adam_y=adam_init(phi_y.params()),
        adam_z=adam_init(phi_z.params()),
        adam_gamma=adam_gamma,
        stats=stats,
    )


def _warm_start(previous: TimestepNets, n: int, t: float, stats: NormalizationStats) -> TimestepNets:
    phi_gamma = previous.phi_gamma.copy() if previous.phi_gamma is not None else None
    return TimestepNets(
        index=n,
        time=t,
        phi_y=previous.phi_y.copy(),
        phi_z=previous.phi_z.copy(),
        phi_gamma=phi_gamma,
        adam_y=adam_init(previous.phi_y.params()),
        adam_z=adam_init(previous.phi_z.params()),
        adam_gamma=adam_init(phi_gamma.params()) if phi_gamma is not None else None,
        stats=stats,
    )


def make_step_batch(
    problem: ProblemSpec,
    grid: TimeGrid,
    n: int,
    batch_size: int,
    stream: RngStream,
    stats: NormalizationStats,
    next_nets: Optional[TimestepNets],
) -> StepBatch:
    """Simulate fresh paths up to t_{n+1} and freeze the (n+1)-targets."""
    paths = simulate_paths(problem, grid, batch_size, stream, up_to=n + 1)
    x = paths.states[:, n, :]
    x_next = paths.states[:, n + 1, :]
    if next_nets is None:
        y_next, z_next, _ = terminal_triple(problem, x_next)
    else:
        y_next, z_next, _ = next_nets.evaluate(x_next)
    return StepBatch(
        t=grid.time(n),
        dt=grid.dt,
        x=x,
        x_in=stats.apply(x),
        dw=paths.increments[:, n, :],
        d_now=paths.malliavin_now[n],
        d_next=paths.malliavin_next[n],
        b_inv_next=problem.diffusion_inv(grid.time(n + 1)),
        y_next=y_next,
        z_next=z_next,
    )


def train_timestep(
    n: int,
    next_nets: Optional[TimestepNets],
    config: SchemeConfig,
    problem: ProblemSpec,
    stream: RngStream,
    grid: Optional[TimeGrid] = None,
    record_losses: Optional[list] = None,
    n_sgd_steps: Optional[int] = None,
):
    """Train the three networks at time index ``n``.

    At the last interior index the networks start fresh and run the terminal
    step budget; earlier indices warm-start from the already-trained
    (n+1)-checkpoint with the shorter interior budget.  Every SGD step draws
    a fresh batch of paths and fresh targets from the frozen checkpoint.
    """
    grid = grid or TimeGrid(problem.horizon, config.n_steps)
    terminal_phase = n == grid.steps - 1
    stats = normalization_stats(problem, grid.time(n), stream.child("norm", n))
    if terminal_phase or next_nets is None:
        nets = _init_nets(config, problem, n, grid.time(n), stats, stream)
    else:
        nets = _warm_start(next_nets, n, grid.time(n), stats)
    schedule = config.schedule_for(terminal_phase)
    total = n_sgd_steps if n_sgd_steps is not None else schedule.total_steps
    omega1, omega2 = config.resolved_weights(problem.dim)

    loss = float("nan")
    for kappa in range(1, total + 1):
        batch = make_step_batch(
            problem, grid, n, config.batch_size, stream.child("batch", n, kappa), stats, next_nets
        )
        loss, g_y, g_z, g_g = loss_and_grads(
            nets, omega1, omega2, problem, batch, config.loss_guard, step_label=f"step {kappa}"
        )
        if record_losses is not None:
            record_losses.append(loss)
        lr = lr_at(schedule, min(kappa, schedule.total_steps))
        new_y, nets.adam_y = adam_step(nets.phi_y.params(), g_y, nets.adam_y, lr)
        nets.phi_y = nets.phi_y.with_params(new_y)
        new_z, nets.adam_z = adam_step(nets.phi_z.params(), g_z, nets.adam_z, lr)
        nets.phi_z = nets.phi_z.with_params(new_z)
        if g_g is not None:
            new_g, nets.adam_gamma = adam_step(nets.phi_gamma.params(), g_g, nets.adam_gamma, lr)
            nets.phi_gamma = nets.phi_gamma.with_params(new_g)
    nets.final_loss = loss
    return nets


def solve_backward(config: SchemeConfig, problem: ProblemSpec) -> SolveResult:
    """Run the full backward sweep and evaluate the triple on a test batch."""
    grid = TimeGrid(problem.horizon, config.n_steps)
    run_stream = RngStream(seed=config.seed).child("solve")
    nets_by_n = [None] * grid.steps
    loss_curves = []
    runtimes = []
    next_nets = None
    fallback = False
    for n in range(grid.steps - 1, -1, -1):
        losses = []
        started = time.perf_counter()
        nets = train_timestep(n, next_nets, config, problem, run_stream, grid, losses)
        runtimes.append(time.perf_counter() - started)
        fallback = fallback or nets.stats.empirical
        loss_curves.append(np.asarray(losses))
        nets_by_n[n] = nets
        next_nets = nets
    loss_curves.reverse()
    runtimes.reverse()

    test_paths = simulate_paths(
        problem, grid, config.test_batch_size, run_stream.child("test")
    )
    d = problem.dim
    b_test = config.test_batch_size
    y_est = np.empty((grid.steps, b_test))
    z_est = np.empty((grid.steps, b_test, d))
    g_est = np.empty((grid.steps, b_test, d, d))
    for n in range(grid.steps):
        x = test_paths.states[:, n, :]
        y, z, g = nets_by_n[n].evaluate(x)
        if g is None:
            g = nets_by_n[n].gamma_from_gradient_net(x)
        y_est[n], z_est[n], g_est[n] = y, z, g
    return SolveResult(
        config=config,
        problem_name=problem.name,
        grid=grid,
        nets=nets_by_n,
        test_states=test_paths.states,
        y_estimates=y_est,
        z_estimates=z_est,
        gamma_estimates=g_est,
        loss_curves=loss_curves,
        step_runtimes=runtimes,
        normalization_fallback=fallback,
    )


# ---------------------------------------------------------------------------
# Checkpoint files: one blob per time index holding the (up to three)
# serialized networks, plus a manifest listing (n, t_n, file, loss_final).
# ---------------------------------------------------------------------------

_LEN = struct.Struct("<Q")


def _pack_nets(nets: TimestepNets) -> bytes:
    blobs = [neural.mlp_to_bytes(nets.phi_y), neural.mlp_to_bytes(nets.phi_z)]
    if nets.phi_gamma is not None:
        blobs.append(neural.mlp_to_bytes(nets.phi_gamma))
    chunks = [_LEN.pack(len(blobs))]
    for blob in blobs:
        chunks.append(_LEN.pack(len(blob)))
        chunks.append(blob)
    return b"".join(chunks)


def _unpack_nets(buf: bytes):
    (count,) = _LEN.unpack_from(buf, 0)
    offset = _LEN.size
    nets = []
    for _ in range(count):
        (size,) = _LEN.unpack_from(buf, offset)
        offset += _LEN.size
        nets.append(neural.mlp_from_bytes(buf[offset : offset + size]))
        offset += size
    return nets


def save_checkpoints(result: SolveResult, directory) -> Path:
    """Write per-timestep network files and the manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for nets in result.nets:
        fname = f"nets_{nets.index:04d}.bin"
        (directory / fname).write_bytes(_pack_nets(nets))
        entries.append(
            {
                "n": nets.index,
                "t": nets.time,
                "file": fname,
                "loss_final": None if np.isnan(nets.final_loss) else nets.final_loss,
            }
        )
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps({"checkpoints": entries}, indent=2))
    return manifest


def load_checkpoint_nets(directory, n: int):
    """Read back the serialized networks for time index ``n``."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    for entry in manifest["checkpoints"]:
        if entry["n"] == n:
            return _unpack_nets((directory / entry["file"]).read_bytes())
    raise FileNotFoundError(f"no checkpoint for time index {n}")
