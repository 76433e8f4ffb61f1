"""Feed-forward networks with hand-rolled reverse-mode differentiation.

The network is a stack of affine maps with tanh on the hidden layers and a
linear output layer.  Training needs two pull-backs: gradients with respect
to the parameters (for SGD) and with respect to the inputs (for the
baseline scheme that differentiates the gradient network).  Both are
implemented as vector-Jacobian products over a cached forward trace.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .numcore import RngStream, ShapeError, sample_uniforms


@dataclass
class Mlp:
    """Multilayer perceptron parameters.

    ``weights[l]`` has shape (width_out, width_in) and ``biases[l]`` shape
    (width_out,), for layers l = 0..L with L hidden layers of equal width.
    """

    weights: list
    biases: list

    @property
    def d0(self) -> int:
        return self.weights[0].shape[1]

    @property
    def d1(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def hidden_layers(self) -> int:
        return len(self.weights) - 1

    @property
    def hidden_width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def param_count(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def params(self) -> list:
        """Flat parameter list in serialization order W1, B1, ..., W_{L+1}, B_{L+1}."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def with_params(self, params: list) -> "Mlp":
        """Rebuild a network from a flat parameter list (shapes must match)."""
        weights = params[0::2]
        biases = params[1::2]
        return Mlp(weights=list(weights), biases=list(biases))

    def copy(self) -> "Mlp":
        return Mlp(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )


def param_count(d0: int, d1: int, hidden_layers: int, width: int) -> int:
    """Closed-form parameter count eta(d0+1) + eta(eta+1)(L-1) + d1(eta+1)."""
    return width * (d0 + 1) + width * (width + 1) * (hidden_layers - 1) + d1 * (width + 1)


def mlp_init(d0: int, d1: int, hidden_layers: int, width: int, stream: RngStream) -> Mlp:
    """Glorot-uniform weights, zero biases."""
    if min(d0, d1, hidden_layers, width) < 1:
        raise ValueError("all network dimensions must be >= 1")
    dims = [d0] + [width] * hidden_layers + [d1]
    weights, biases = [], []
    for layer, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
        limit = np.sqrt(6.0 / (n_in + n_out))
        u = sample_uniforms(stream.child("weights", layer), n_out * n_in)
        weights.append(((2.0 * u - 1.0) * limit).reshape(n_out, n_in))
        biases.append(np.zeros(n_out))
    return Mlp(weights=weights, biases=biases)


def forward_trace(net: Mlp, x_batch: np.ndarray):
    """Run the network, returning (output, activations) for later pull-backs.

    ``activations[l]`` is the input to layer l (post-tanh for l >= 1).
    """
    x = np.asarray(x_batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.d0:
        raise ShapeError(f"expected input of shape (B, {net.d0}), got {x.shape}")
    activations = [x]
    h = x
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.T + b
        if l < last:
            h = np.tanh(h)
            activations.append(h)
    return h, activations


def mlp_forward(net: Mlp, x_batch: np.ndarray) -> np.ndarray:
    """Batched forward pass, shape (B, d0) -> (B, d1)."""
    out, _ = forward_trace(net, x_batch)
    return out


def _check_upstream(net: Mlp, x_batch, upstream) -> np.ndarray:
    u = np.asarray(upstream, dtype=np.float64)
    b = np.asarray(x_batch).shape[0]
    if u.shape != (b, net.d1):
        raise ShapeError(f"upstream must have shape ({b}, {net.d1}), got {u.shape}")
    return u


def vjp_params_from_trace(net: Mlp, activations: list, upstream: np.ndarray) -> list:
    """Parameter gradients of sum(upstream * output), flat list like ``params()``."""
    grads_w = [None] * len(net.weights)
    grads_b = [None] * len(net.biases)
    g = upstream
    for l in range(len(net.weights) - 1, -1, -1):
        grads_w[l] = g.T @ activations[l]
        grads_b[l] = g.sum(axis=0)
        if l > 0:
            g = (g @ net.weights[l]) * (1.0 - activations[l] ** 2)
    out = []
    for w, b in zip(grads_w, grads_b):
        out.append(w)
        out.append(b)
    return out


def vjp_params(net: Mlp, x_batch, upstream) -> list:
    """Gradients w.r.t. all parameters, summed over the batch."""
    _, activations = forward_trace(net, x_batch)
    return vjp_params_from_trace(net, activations, _check_upstream(net, x_batch, upstream))


def vjp_inputs_from_trace(net: Mlp, activations: list, upstream: np.ndarray) -> np.ndarray:
    g = upstream
    for l in range(len(net.weights) - 1, 0, -1):
        g = (g @ net.weights[l]) * (1.0 - activations[l] ** 2)
    return g @ net.weights[0]


def vjp_inputs(net: Mlp, x_batch, upstream) -> np.ndarray:
    """Per-sample gradient rows upstream . (d output / d input), shape (B, d0)."""
    _, activations = forward_trace(net, x_batch)
    return vjp_inputs_from_trace(net, activations, _check_upstream(net, x_batch, upstream))


def input_jacobian(net: Mlp, x_batch) -> np.ndarray:
    """Per-sample Jacobians (B, d1, d0), stacked from d1 unit-vector pulls."""
    x = np.asarray(x_batch, dtype=np.float64)
    _, activations = forward_trace(net, x)
    b = x.shape[0]
    jac = np.empty((b, net.d1, net.d0))
    unit = np.zeros((b, net.d1))
    for k in range(net.d1):
        unit[:, k] = 1.0
        jac[:, k, :] = vjp_inputs_from_trace(net, activations, unit)
        unit[:, k] = 0.0
    return jac


# ---------------------------------------------------------------------------
# Adam with bias correction.
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int
    first_moment: list
    second_moment: list
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_init(params: list, beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    return AdamState(
        step=0,
        first_moment=[np.zeros_like(p) for p in params],
        second_moment=[np.zeros_like(p) for p in params],
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
    )


def adam_step(params: list, grads: list, state: AdamState, lr: float):
    """One bias-corrected Adam update; returns (new_params, new_state)."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if len(params) != len(grads):
        raise ShapeError("params and grads must have matching structure")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        new_params.append(p - lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon))
        new_m.append(m)
        new_v.append(v)
    return new_params, replace(state, step=t, first_moment=new_m, second_moment=new_v)


# ---------------------------------------------------------------------------
# Stepwise learning-rate schedules.
# ---------------------------------------------------------------------------


class ScheduleExhaustedError(ValueError):
    """Raised when a step index falls outside the schedule's plateaus."""


@dataclass(frozen=True)
class LrSchedule:
    """Piecewise-constant learning rate over 1-based step indices."""

    boundaries: tuple
    rates: tuple

    def __post_init__(self):
        if len(self.boundaries) != len(self.rates):
            raise ValueError("boundaries and rates must pair up")
        if any(b2 <= b1 for b1, b2 in zip(self.boundaries, self.boundaries[1:])):
            raise ValueError("boundaries must strictly increase")
        if any(r2 >= r1 for r1, r2 in zip(self.rates, self.rates[1:])):
            raise ValueError("rates must strictly decrease")

    @property
    def total_steps(self) -> int:
        return self.boundaries[-1]

    def rescaled(self, total_steps: int) -> "LrSchedule":
        """Compress or stretch the plateau boundaries to a new total step count.

        Keeps the rate ladder; used by reduced-budget presets where truncating
        the full-scale table would never reach the small rates.
        """
        if total_steps == self.total_steps:
            return self
        scale = total_steps / self.total_steps
        bounds, rates = [], []
        for b, r in zip(self.boundaries, self.rates):
            nb = min(int(round(b * scale)), total_steps)
            if bounds and nb <= bounds[-1]:
                continue
            bounds.append(nb)
            rates.append(r)
        bounds[-1] = total_steps
        return LrSchedule(tuple(bounds), tuple(rates))


# Plateau tables for the first (terminal) optimization and the warm-started
# interior ones.
TERMINAL_SCHEDULE = LrSchedule(
    boundaries=(2000, 4000, 8000, 12000, 16000, 20000, 24000),
    rates=(1e-2, 3e-3, 1e-3, 3e-4, 1e-4, 3e-5, 1e-5),
)
INTERIOR_SCHEDULE = LrSchedule(
    boundaries=(2000, 4000, 6000, 8000, 10000),
    rates=(1e-3, 3e-4, 1e-4, 3e-5, 1e-5),
)


def lr_at(schedule: LrSchedule, kappa: int) -> float:
    """Learning rate for 1-based optimization step ``kappa``."""
    if kappa < 1 or kappa > schedule.total_steps:
        raise ScheduleExhaustedError(
            f"step {kappa} outside schedule range [1, {schedule.total_steps}]"
        )
    for bound, rate in zip(schedule.boundaries, schedule.rates):
        if kappa <= bound:
            return rate
    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# Serialization: little-endian header (d0, d1, L, eta) then float64 payload
# in layer order W1, B1, ..., W_{L+1}, B_{L+1}.
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4I")


def mlp_to_bytes(net: Mlp) -> bytes:
    chunks = [_HEADER.pack(net.d0, net.d1, net.hidden_layers, net.hidden_width)]
    for w, b in zip(net.weights, net.biases):
        chunks.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(chunks)


def mlp_from_bytes(buf: bytes) -> Mlp:
    d0, d1, layers, width = _HEADER.unpack_from(buf, 0)
    offset = _HEADER.size
    dims = [d0] + [width] * layers + [d1]
    weights, biases = [], []
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(buf, dtype="<f8", count=n_out * n_in, offset=offset)
        offset += w.nbytes
        b = np.frombuffer(buf, dtype="<f8", count=n_out, offset=offset)
        offset += b.nbytes
        weights.append(w.reshape(n_out, n_in).astype(np.float64))
        biases.append(b.astype(np.float64))
    if offset != len(buf):
        raise ValueError("trailing bytes after network payload")
    return Mlp(weights=weights, biases=biases)


def expected_blob_size(net: Mlp) -> int:
    return _HEADER.size + 8 * net.param_count


def clone_structure(net: Mlp) -> Optional[Mlp]:
    """Deep copy used for warm starts between adjacent time steps."""
    return net.copy()
