"""Accuracy metrics and multi-run aggregation.

MSE is the batch mean of squared Frobenius distances per sample; the
relative variant normalizes each sample by its reference norm before
averaging, excluding (and counting) samples whose reference vanishes.
Aggregation over independent runs reports mean and population standard
deviation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .numcore import ShapeError

PROCESSES = ("Y", "Z", "Gamma")


class MetricUndefinedError(ValueError):
    """Relative MSE requested against an all-zero reference batch."""


def _per_sample_sq(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return np.sum(a.reshape(a.shape[0], -1) ** 2, axis=1)


def mse(approx, reference) -> float:
    """Batch mean of per-sample squared Frobenius distance."""
    approx = np.asarray(approx, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if approx.shape != reference.shape:
        raise ShapeError(f"shape mismatch: {approx.shape} vs {reference.shape}")
    return float(np.mean(_per_sample_sq(approx - reference)))


def relative_mse_detail(approx, reference):
    """(relative mse, excluded-sample count); excludes zero-norm references."""
    approx = np.asarray(approx, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if approx.shape != reference.shape:
        raise ShapeError(f"shape mismatch: {approx.shape} vs {reference.shape}")
    err_sq = _per_sample_sq(approx - reference)
    ref_sq = _per_sample_sq(reference)
    keep = ref_sq > 0.0
    excluded = int(np.sum(~keep))
    if not np.any(keep):
        raise MetricUndefinedError("every reference sample has zero norm")
    return float(np.mean(err_sq[keep] / ref_sq[keep])), excluded


def relative_mse(approx, reference) -> float:
    """Batch mean of per-sample squared errors normalized by reference norms."""
    value, _ = relative_mse_detail(approx, reference)
    return value


def gamma_to_original_domain(gamma_ln, x_original) -> np.ndarray:
    """Map log-coordinate gamma to price coordinates: divide column k by the
    k-th price component, per sample."""
    gamma_ln = np.asarray(gamma_ln, dtype=np.float64)
    x = np.asarray(x_original, dtype=np.float64)
    if np.any(x <= 0):
        raise ValueError("original-domain states must be strictly positive")
    return gamma_ln / x[:, None, :]


@dataclass
class ProcessErrorSeries:
    """Per-timestep errors of one process against its reference."""

    process: str
    mse: np.ndarray
    relative_mse: np.ndarray
    excluded: np.ndarray
    batch_size: int


@dataclass
class RunAggregate:
    """Mean and population standard deviation over independent runs."""

    q_runs: int
    mean_mse: dict
    std_mse: dict
    mean_relative_mse: dict
    std_relative_mse: dict
    mean_runtime: float


def aggregate(runs: list, runtimes: list) -> RunAggregate:
    """Elementwise mean/std over runs of per-process metric series.

    ``runs`` is a list of dicts mapping process name to ProcessErrorSeries;
    all runs must share processes and series lengths.
    """
    if not runs:
        raise ValueError("need at least one run")
    if len(runtimes) != len(runs):
        raise ShapeError("one runtime per run required")
    processes = list(runs[0])
    mean_mse, std_mse, mean_rel, std_rel = {}, {}, {}, {}
    for proc in processes:
        stacked = np.stack([np.asarray(r[proc].mse, dtype=np.float64) for r in runs])
        rel = np.stack([np.asarray(r[proc].relative_mse, dtype=np.float64) for r in runs])
        if any(set(r) != set(processes) for r in runs):
            raise ShapeError("runs disagree on the process set")
        mean_mse[proc] = stacked.mean(axis=0)
        std_mse[proc] = stacked.std(axis=0)  # population std
        mean_rel[proc] = rel.mean(axis=0)
        std_rel[proc] = rel.std(axis=0)
    return RunAggregate(
        q_runs=len(runs),
        mean_mse=mean_mse,
        std_mse=std_mse,
        mean_relative_mse=mean_rel,
        std_relative_mse=std_rel,
        mean_runtime=float(np.mean(runtimes)),
    )
