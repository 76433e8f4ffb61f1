"""Dense float64 linear-algebra kernels and a counter-based Gaussian RNG.

Everything here is pure and value-like: matrices are plain 2-D float64
ndarrays, and random streams are immutable (seed, stream_id, counter)
triples.  A stream never mutates when sampled from; callers move through
the stream space explicitly with ``child`` / ``advanced``, which makes
results independent of evaluation order and safe to shard across workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


def as_matrix(a) -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting higher ranks."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with an explicit inner-dimension check."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def frobenius_norm(a) -> float:
    """Square root of the sum of squared entries (Euclidean norm for vectors)."""
    return float(np.sqrt(np.sum(np.square(np.asarray(a, dtype=np.float64)))))


# ---------------------------------------------------------------------------
# Counter-based RNG.
#
# Outputs are a pure function of (seed, stream_id, counter): each 64-bit
# word is SplitMix64's avalanche finalizer applied to an affine walk of the
# counter, and (seed, stream_id) only select the walk's starting point.
# Sub-streams derived via `child` are therefore assignable by index (e.g.
# one per Monte-Carlo sample) and the whole construction vectorizes.
# ---------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_SEED_DOMAIN = np.uint64(0x8F0E61D5B5A42B6D)
_MASK64 = (1 << 64) - 1

# 2**-53 and 2**-54: map the top 53 bits of a word into (0, 1), never
# touching the endpoints so that ndtri stays finite.
_U53 = 1.0 / (1 << 53)
_U54 = 0.5 / (1 << 53)


def _finalize(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * _MIX1
        x = (x ^ (x >> np.uint64(27))) * _MIX2
        return x ^ (x >> np.uint64(31))


def _fold(h: np.ndarray, v: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return _finalize((h ^ v) + _GOLDEN)


def _label_word(label) -> np.uint64:
    """Map an int or str label to a 64-bit word (strings via FNV-1a)."""
    if isinstance(label, (int, np.integer)):
        return np.uint64(int(label) & _MASK64)
    if isinstance(label, str):
        h = 0xCBF29CE484222325
        for byte in label.encode("utf-8"):
            h = ((h ^ byte) * 0x100000001B3) & _MASK64
        return np.uint64(h)
    raise TypeError(f"stream labels must be int or str, got {type(label)!r}")


@dataclass(frozen=True)
class RngStream:
    """Immutable handle into the counter-based random sequence.

    Identical (seed, stream_id, counter) triples produce identical output
    on every platform.  Sampling does not advance the stream; use
    ``advanced`` to move the counter or ``child`` to derive an
    independent sub-stream.
    """

    seed: int
    stream_id: int = 0
    counter: int = 0

    def child(self, *labels) -> "RngStream":
        """Derive an independent sub-stream keyed by the given labels."""
        sid = np.uint64(self.stream_id & _MASK64)
        for label in labels:
            sid = _fold(sid, _label_word(label))
        return RngStream(self.seed, int(sid), 0)

    def advanced(self, n: int) -> "RngStream":
        """Stream with the counter moved forward by ``n`` draws."""
        if n < 0:
            raise ValueError("cannot advance a stream backwards")
        return RngStream(self.seed, self.stream_id, self.counter + n)

    def _base_state(self) -> np.uint64:
        h = _fold(_SEED_DOMAIN, np.uint64(self.seed & _MASK64))
        return _fold(h, np.uint64(self.stream_id & _MASK64))


def _raw_words(stream: RngStream, count: int) -> np.ndarray:
    base = stream._base_state()
    idx = np.arange(stream.counter + 1, stream.counter + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _finalize(base + idx * _GOLDEN)


def sample_uniforms(stream: RngStream, count: int) -> np.ndarray:
    """``count`` i.i.d. uniforms on the open interval (0, 1)."""
    if count < 0:
        raise ValueError("count must be nonnegative")
    if count == 0:
        return np.empty(0, dtype=np.float64)
    words = _raw_words(stream, count)
    return (words >> np.uint64(11)).astype(np.float64) * _U53 + _U54


def sample_standard_normals(stream: RngStream, count: int) -> np.ndarray:
    """``count`` i.i.d. standard normals via inverse-CDF of the uniforms."""
    if count == 0:
        return np.empty(0, dtype=np.float64)
    return ndtri(sample_uniforms(stream, count))


def sample_standard_normals_block(stream: RngStream, ids, count: int) -> np.ndarray:
    """Per-sub-stream normals, vectorized over the sub-stream indices.

    Row ``i`` equals ``sample_standard_normals(stream.child(int(ids[i])), count)``
    bit for bit, so batched and per-sample evaluation orders agree exactly.
    """
    ids = np.asarray(ids)
    if ids.ndim != 1:
        raise ShapeError("ids must be a 1-D integer array")
    if count == 0:
        return np.empty((ids.size, 0), dtype=np.float64)
    sid = _fold(
        np.full(ids.shape, np.uint64(stream.stream_id & _MASK64), dtype=np.uint64),
        ids.astype(np.uint64),
    )
    h = _fold(_SEED_DOMAIN, np.uint64(stream.seed & _MASK64))
    base = _fold(np.full(ids.shape, h, dtype=np.uint64), sid)
    idx = np.arange(1, count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        words = _finalize(base[:, None] + idx[None, :] * _GOLDEN)
    return ndtri((words >> np.uint64(11)).astype(np.float64) * _U53 + _U54)
