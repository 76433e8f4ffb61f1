"""Experiment orchestration: configs, multi-run scoring, and result files.

A single declarative config drives one experiment: problem, scheme, grid
size, run count, and training budget.  ``run`` executes Q seeded solves and
scores them against the problem's reference (closed form, Monte-Carlo, or a
published constant); ``compare`` pits the two schemes against each other
over a list of grid sizes with shared path seeds; ``sweep_n`` studies grid
refinement for one scheme.
"""

from __future__ import annotations

import csv
import io
import json
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, metrics
from .metrics import PROCESSES, MetricUndefinedError, ProcessErrorSeries, aggregate
from .numcore import RngStream
from .problems import (
    LocalVolParams,
    ProblemSpec,
    hjb_reference,
    make_black_scholes,
    make_different_rates,
    make_hjb,
    make_local_vol,
)
from .sde import TimeGrid, simulate_paths
from .solver import DivergenceError, SchemeConfig, SolveResult, save_checkpoints, solve_backward

PRESETS = {
    "desk": {
        "hidden_width": 32,
        "terminal_steps": 4000,
        "interior_steps": 2000,
        "batch_size": 256,
        "q_runs": 3,
    },
    "paper": {
        "hidden_width": None,  # 100 + d
        "terminal_steps": 24000,
        "interior_steps": 10000,
        "batch_size": 1024,
        "q_runs": 10,
    },
}

PROBLEM_NAMES = ("black-scholes", "different-rates", "hjb", "local-vol")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass
class ExperimentConfig:
    """Declarative description of one experiment.

    Budget fields left as None are filled from the preset; every default
    reproduces the full-scale experimental setup for the chosen problem.
    """

    problem: str = "black-scholes"
    scheme: str = "dlbdp"
    dim: int = 1
    n_steps: int = 8
    n_list: Optional[list] = None
    preset: str = "paper"
    q_runs: Optional[int] = None
    seed: int = 0
    seeds: Optional[list] = None
    batch_size: Optional[int] = None
    hidden_width: Optional[int] = None
    hidden_layers: int = 2
    terminal_steps: Optional[int] = None
    interior_steps: Optional[int] = None
    test_batch_size: int = 1024
    omega1: Optional[float] = None
    omega2: Optional[float] = None
    out_dir: str = "results"
    emit_paths: bool = False
    checkpoint: bool = False
    oracle_samples: int = 1_000_000
    problem_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.problem not in PROBLEM_NAMES:
            raise ConfigError(f"unknown problem {self.problem!r}; choose from {PROBLEM_NAMES}")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {tuple(PRESETS)}")
        if self.seeds is not None and self.q_runs is not None and len(self.seeds) != self.q_runs:
            raise ConfigError("seed list length must equal the run count")

    # -- resolution against the preset --------------------------------------

    def _preset_value(self, key: str):
        own = getattr(self, key)
        return PRESETS[self.preset][key] if own is None else own

    def resolved_q(self) -> int:
        q = self._preset_value("q_runs")
        return int(q)

    def resolved_seeds(self) -> list:
        if self.seeds is not None:
            if len(self.seeds) != self.resolved_q():
                raise ConfigError("seed list length must equal the run count")
            return [int(s) for s in self.seeds]
        return [self.seed * 1_000_003 + q for q in range(self.resolved_q())]

    def scheme_config(self, n_steps: int, seed: int) -> SchemeConfig:
        return SchemeConfig(
            scheme=self.scheme,
            n_steps=n_steps,
            batch_size=int(self._preset_value("batch_size")),
            terminal_steps=int(self._preset_value("terminal_steps")),
            interior_steps=int(self._preset_value("interior_steps")),
            hidden_layers=self.hidden_layers,
            hidden_width=self._preset_value("hidden_width"),
            omega1=self.omega1,
            omega2=self.omega2,
            seed=seed,
            test_batch_size=self.test_batch_size,
        )

    # -- (de)serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_toml(cls, path) -> "ExperimentConfig":
        if sys.version_info >= (3, 11):
            import tomllib as toml
        else:
            import tomli as toml
        with open(path, "rb") as fh:
            return cls.from_dict(toml.load(fh))

    def with_overrides(self, pairs: list) -> "ExperimentConfig":
        """Apply repeatable ``key=value`` overrides with dotted-path keys."""
        data = self.to_dict()
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override {pair!r} is not of the form key=value")
            key, raw = pair.split("=", 1)
            value = _parse_scalar(raw)
            target = data
            parts = key.strip().split(".")
            for part in parts[:-1]:
                target = target.setdefault(part, {})
                if not isinstance(target, dict):
                    raise ConfigError(f"cannot descend into {key!r}")
            target[parts[-1]] = value
        return ExperimentConfig.from_dict(data)


def _parse_scalar(raw: str):
    raw = raw.strip()
    if sys.version_info >= (3, 11):
        import tomllib as toml
    else:
        import tomli as toml
    try:
        return toml.loads(f"v = {raw}")["v"]
    except toml.TOMLDecodeError:
        return raw


def make_problem(config: ExperimentConfig) -> ProblemSpec:
    """Instantiate the configured benchmark problem."""
    params = dict(config.problem_params)
    d = config.dim
    if config.problem == "black-scholes":
        return make_black_scholes(d, **params)
    if config.problem == "different-rates":
        params.setdefault("payoff_kind", "call" if d == 1 else "max-call-spread")
        return make_different_rates(d, **params)
    if config.problem == "hjb":
        return make_hjb(d, **params)
    if config.problem == "local-vol":
        lv_keys = {f.name for f in fields(LocalVolParams)}
        lv_kwargs = {k: params.pop(k) for k in list(params) if k in lv_keys}
        if lv_kwargs:
            params["params"] = LocalVolParams(**lv_kwargs)
        return make_local_vol(d, **params)
    raise ConfigError(f"unknown problem {config.problem!r}")


# ---------------------------------------------------------------------------
# Scoring a solve against the problem's reference.
# ---------------------------------------------------------------------------


def _score_against_exact(result: SolveResult, problem: ProblemSpec) -> dict:
    n_steps = result.grid.steps
    b = result.test_states.shape[0]
    series = {p: dict(mse=[], rel=[], exc=[]) for p in PROCESSES}
    for n in range(n_steps):
        t = result.grid.time(n)
        x = result.test_states[:, n, :]
        y_ref, z_ref, g_ref = problem.exact_solution(t, x)
        gamma = result.gamma_estimates[n]
        if problem.ln_domain:
            gamma = metrics.gamma_to_original_domain(gamma, np.exp(x))
        for proc, approx, ref in (
            ("Y", result.y_estimates[n][:, None], y_ref[:, None]),
            ("Z", result.z_estimates[n], z_ref),
            ("Gamma", gamma, g_ref),
        ):
            series[proc]["mse"].append(metrics.mse(approx, ref))
            try:
                rel, exc = metrics.relative_mse_detail(approx, ref)
            except MetricUndefinedError:
                rel, exc = float("nan"), b
            series[proc]["rel"].append(rel)
            series[proc]["exc"].append(exc)
    return {
        p: ProcessErrorSeries(
            process=p,
            mse=np.asarray(series[p]["mse"]),
            relative_mse=np.asarray(series[p]["rel"]),
            excluded=np.asarray(series[p]["exc"]),
            batch_size=b,
        )
        for p in PROCESSES
    }


def _score_at_origin(result: SolveResult, references: dict) -> dict:
    """Score only the t0 triple against constant references (per-process)."""
    n_steps = result.grid.steps
    b = result.test_states.shape[0]
    out = {}
    approx_by_proc = {
        "Y": result.y_estimates[0][:, None],
        "Z": result.z_estimates[0],
        "Gamma": result.gamma_estimates[0].reshape(b, -1),
    }
    for proc in PROCESSES:
        mse_arr = np.full(n_steps, np.nan)
        rel_arr = np.full(n_steps, np.nan)
        exc_arr = np.zeros(n_steps, dtype=int)
        ref = references.get(proc)
        if ref is not None:
            ref_b = np.broadcast_to(np.asarray(ref, float).reshape(1, -1), approx_by_proc[proc].shape)
            mse_arr[0] = metrics.mse(approx_by_proc[proc], ref_b)
            try:
                rel_arr[0], exc_arr[0] = metrics.relative_mse_detail(approx_by_proc[proc], ref_b)
            except MetricUndefinedError:
                exc_arr[0] = b
        out[proc] = ProcessErrorSeries(
            process=proc,
            mse=mse_arr,
            relative_mse=rel_arr,
            excluded=exc_arr,
            batch_size=b,
        )
    return out


def build_reference(problem: ProblemSpec, config: ExperimentConfig):
    """Reference data reused across the Q runs of one experiment.

    Returns ("exact", None), ("origin", {process: constant}), or
    ("none", None) when only training diagnostics are available.
    """
    if problem.exact_solution is not None:
        return "exact", None
    if problem.name.startswith("hjb"):
        stream = RngStream(seed=config.seed).child("oracle", problem.name)
        y0, z0, g0, _ = hjb_reference(
            problem.dim,
            config.oracle_samples,
            stream,
            horizon=problem.horizon,
            x0=np.asarray(problem.x0, float),
            diffusion_scale=float(problem.diffusion(0.0)[0, 0]),
        )
        return "origin", {"Y": np.array([y0]), "Z": z0, "Gamma": g0.reshape(-1)}
    if problem.y0_reference is not None:
        return "origin", {"Y": np.array([problem.y0_reference])}
    return "none", None


def score_run(result: SolveResult, problem: ProblemSpec, reference) -> dict:
    kind, payload = reference
    if kind == "exact":
        return _score_against_exact(result, problem)
    if kind == "origin":
        return _score_at_origin(result, payload)
    return _score_at_origin(result, {})


# ---------------------------------------------------------------------------
# Reports and files.
# ---------------------------------------------------------------------------


@dataclass
class RunReport:
    """Everything needed to reconstruct one experiment's aggregates."""

    config: dict
    environment: dict
    problem_name: str
    n_steps: int
    t_grid: list
    seeds: list
    runs: list  # per-run dicts with metric series, runtime, flags
    aggregate_data: dict
    mean_runtime: float
    notes: dict

    def to_json(self) -> str:
        return json.dumps(
            {
                "config": self.config,
                "environment": self.environment,
                "problem": self.problem_name,
                "n_steps": self.n_steps,
                "t_grid": self.t_grid,
                "seeds": self.seeds,
                "runs": self.runs,
                "aggregate": self.aggregate_data,
                "mean_runtime_s": self.mean_runtime,
                "notes": self.notes,
            },
            indent=2,
        )


def _environment_fingerprint() -> dict:
    return {
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "float_width_bits": 64,
    }


def _fmt(x) -> str:
    """Shortest round-trip decimal for floats; plain text otherwise."""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _series_to_list(arr) -> list:
    return [float(v) for v in np.asarray(arr, dtype=np.float64)]


def run(config: ExperimentConfig, out_dir=None, n_steps: Optional[int] = None) -> RunReport:
    """Execute Q seeded solves, score them, and write the report files."""
    problem = make_problem(config)
    n_steps = config.n_steps if n_steps is None else n_steps
    reference = build_reference(problem, config)
    seeds = config.resolved_seeds()

    run_entries = []
    scored_runs = []
    runtimes = []
    for seed in seeds:
        scheme_cfg = config.scheme_config(n_steps, seed)
        entry = {"seed": seed, "diverged": False, "normalization_fallback": False}
        started = time.perf_counter()
        try:
            result = solve_backward(scheme_cfg, problem)
        except DivergenceError as err:
            entry["diverged"] = True
            entry["divergence_message"] = str(err)
            entry["runtime_s"] = time.perf_counter() - started
            run_entries.append(entry)
            continue
        runtime = time.perf_counter() - started
        scored = score_run(result, problem, reference)
        entry["runtime_s"] = runtime
        entry["normalization_fallback"] = result.normalization_fallback
        entry["final_losses"] = [nets.final_loss for nets in result.nets]
        entry["per_process"] = {
            p: {
                "mse": _series_to_list(scored[p].mse),
                "relative_mse": _series_to_list(scored[p].relative_mse),
                "excluded": [int(v) for v in scored[p].excluded],
            }
            for p in PROCESSES
        }
        run_entries.append(entry)
        scored_runs.append(scored)
        runtimes.append(runtime)
        if config.checkpoint and out_dir is not None:
            save_checkpoints(result, Path(out_dir) / f"checkpoints_seed{seed}")
        if config.emit_paths and out_dir is not None and seed == seeds[0]:
            _write_paths_csv(Path(out_dir) / "paths.csv", result.test_states, result.grid)

    if not scored_runs:
        raise DivergenceError("every run diverged; see the per-run messages")
    agg = aggregate(scored_runs, runtimes)
    grid = TimeGrid(problem.horizon, n_steps)
    report = RunReport(
        config=config.to_dict(),
        environment=_environment_fingerprint(),
        problem_name=problem.name,
        n_steps=n_steps,
        t_grid=[grid.time(n) for n in range(n_steps)],
        seeds=seeds,
        runs=run_entries,
        aggregate_data={
            p: {
                "mean_mse": _series_to_list(agg.mean_mse[p]),
                "std_mse": _series_to_list(agg.std_mse[p]),
                "mean_relative_mse": _series_to_list(agg.mean_relative_mse[p]),
                "std_relative_mse": _series_to_list(agg.std_relative_mse[p]),
            }
            for p in PROCESSES
        },
        mean_runtime=agg.mean_runtime,
        notes={
            "std_kind": "population",
            "relative_mse": "per-sample normalization; zero-norm reference samples excluded and counted",
            "test_batch": "resimulated per run from a run-indexed stream",
            "reference_kind": reference[0],
        },
    )
    if out_dir is not None:
        write_report_files(report, out_dir)
    return report


def _write_paths_csv(path: Path, states: np.ndarray, grid: TimeGrid) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    b, m, d = states.shape
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "n", "t"] + [f"X{k + 1}" for k in range(d)])
        for j in range(b):
            for n in range(m):
                writer.writerow([j, n, _fmt(grid.time(n))] + [_fmt(v) for v in states[j, n]])


def metrics_csv_text(report: RunReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["n", "t_n", "process", "mean_mse", "std_mse", "mean_rel_mse", "std_rel_mse"])
    for n, t in enumerate(report.t_grid):
        for proc in PROCESSES:
            agg = report.aggregate_data[proc]
            writer.writerow(
                [
                    n,
                    _fmt(t),
                    proc,
                    _fmt(agg["mean_mse"][n]),
                    _fmt(agg["std_mse"][n]),
                    _fmt(agg["mean_relative_mse"][n]),
                    _fmt(agg["std_relative_mse"][n]),
                ]
            )
    return buf.getvalue()


def plot_series_csv_text(report: RunReport) -> str:
    """Per-timestep mean and mean +/- std series, one row per (n, process)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["n", "t_n", "process", "mean_mse", "mean_minus_std", "mean_plus_std"])
    for n, t in enumerate(report.t_grid):
        for proc in PROCESSES:
            agg = report.aggregate_data[proc]
            m, s = agg["mean_mse"][n], agg["std_mse"][n]
            writer.writerow([n, _fmt(t), proc, _fmt(m), _fmt(m - s), _fmt(m + s)])
    return buf.getvalue()


def summary_text(report: RunReport) -> str:
    lines = [
        f"problem={report.problem_name} scheme={report.config['scheme']} "
        f"N={report.n_steps} Q={len(report.seeds)} preset={report.config['preset']}",
        "per-process metrics at t0 (mean over runs, population std in brackets):",
    ]
    for proc in PROCESSES:
        agg = report.aggregate_data[proc]
        lines.append(
            f"  {proc}: mean_rel_mse={_fmt(agg['mean_relative_mse'][0])} "
            f"({_fmt(agg['std_relative_mse'][0])}), mean_mse={_fmt(agg['mean_mse'][0])} "
            f"({_fmt(agg['std_mse'][0])})"
        )
    lines.append("full per-timestep series: metrics.csv; runtimes and raw runs: report.json")
    return "\n".join(lines) + "\n"


def write_report_files(report: RunReport, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "metrics.csv").write_text(metrics_csv_text(report))
    (out / "plot_series.csv").write_text(plot_series_csv_text(report))
    (out / "summary.txt").write_text(summary_text(report))
    return out


# ---------------------------------------------------------------------------
# Scheme comparison and grid sweeps.
# ---------------------------------------------------------------------------


def _assert_comparable(config_a: ExperimentConfig, config_b: ExperimentConfig) -> None:
    da, db = config_a.to_dict(), config_b.to_dict()
    for ignored in ("scheme", "out_dir"):
        da.pop(ignored)
        db.pop(ignored)
    if da != db:
        diff = {k for k in da if da[k] != db[k]}
        raise ConfigError(f"comparison configs differ beyond the scheme: {sorted(diff)}")


def compare(config_dbdp: ExperimentConfig, config_dlbdp: ExperimentConfig, out_dir=None):
    """Side-by-side scheme comparison over the configured grid sizes.

    Both configs must agree on everything except the scheme; shared seeds
    make the path noise identical so differences isolate the scheme.
    Returns (rows, reports) where rows drive compare.csv / compare.txt.
    """
    _assert_comparable(config_dbdp, config_dlbdp)
    if config_dbdp.scheme != "dbdp" or config_dlbdp.scheme != "dlbdp":
        raise ConfigError("pass the baseline config first and the differential one second")
    n_values = config_dbdp.n_list or [config_dbdp.n_steps]
    rows = []
    reports = {}
    for n in n_values:
        for config in (config_dbdp, config_dlbdp):
            sub_dir = None
            if out_dir is not None:
                sub_dir = Path(out_dir) / f"{config.scheme}_N{n}"
            report = run(config, out_dir=sub_dir, n_steps=n)
            reports[(config.scheme, n)] = report
            diverged = sum(1 for r in report.runs if r["diverged"])
            for proc in PROCESSES:
                agg = report.aggregate_data[proc]
                rows.append(
                    {
                        "n_steps": n,
                        "scheme": config.scheme,
                        "process": proc,
                        "mean_rel_mse_t0": agg["mean_relative_mse"][0],
                        "std_rel_mse_t0": agg["std_relative_mse"][0],
                        "mean_runtime_s": report.mean_runtime,
                        "diverged_runs": diverged,
                    }
                )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "compare.csv").write_text(compare_csv_text(rows))
        (out / "compare.txt").write_text(compare_text(rows))
    return rows, reports


def compare_csv_text(rows: list) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["n_steps", "scheme", "process", "mean_rel_mse_t0", "std_rel_mse_t0", "mean_runtime_s", "diverged_runs"]
    )
    for row in rows:
        writer.writerow(
            [
                row["n_steps"],
                row["scheme"],
                row["process"],
                _fmt(row["mean_rel_mse_t0"]),
                _fmt(row["std_rel_mse_t0"]),
                _fmt(row["mean_runtime_s"]),
                row["diverged_runs"],
            ]
        )
    return buf.getvalue()


def compare_text(rows: list) -> str:
    lines = ["scheme comparison, mean relative MSE at t0 (std) per process:"]
    for row in rows:
        flag = " [diverged runs: %d]" % row["diverged_runs"] if row["diverged_runs"] else ""
        lines.append(
            f"  N={row['n_steps']} {row['scheme']:>6} {row['process']:>5}: "
            f"{_fmt(row['mean_rel_mse_t0'])} ({_fmt(row['std_rel_mse_t0'])}) "
            f"runtime={_fmt(row['mean_runtime_s'])}s{flag}"
        )
    return "\n".join(lines) + "\n"


def sweep_n(config: ExperimentConfig, n_list: list, out_dir=None):
    """One run() per grid size plus a refinement summary at t0."""
    if not n_list or any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ConfigError("n_list must be nonempty and strictly ascending")
    reports = {}
    rows = []
    for n in n_list:
        sub_dir = Path(out_dir) / f"N{n}" if out_dir is not None else None
        report = run(config, out_dir=sub_dir, n_steps=n)
        reports[n] = report
        for proc in PROCESSES:
            agg = report.aggregate_data[proc]
            rows.append(
                {
                    "n_steps": n,
                    "process": proc,
                    "mean_rel_mse_t0": agg["mean_relative_mse"][0],
                    "std_rel_mse_t0": agg["std_relative_mse"][0],
                }
            )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["n_steps", "process", "mean_rel_mse_t0", "std_rel_mse_t0"])
        for row in rows:
            writer.writerow(
                [row["n_steps"], row["process"], _fmt(row["mean_rel_mse_t0"]), _fmt(row["std_rel_mse_t0"])]
            )
        (out / "sweep.csv").write_text(buf.getvalue())
    return rows, reports


def dump_paths(config: ExperimentConfig, out_file, batch_size: int = 64) -> Path:
    """Simulate one batch under the configured problem and write the CSV dump."""
    problem = make_problem(config)
    grid = TimeGrid(problem.horizon, config.n_steps)
    stream = RngStream(seed=config.seed).child("paths-dump")
    batch = simulate_paths(problem, grid, batch_size, stream)
    out_file = Path(out_file)
    _write_paths_csv(out_file, batch.states, grid)
    return out_file


def evaluate_oracle(config: ExperimentConfig) -> dict:
    """Stand-alone reference evaluation at (t=0, x0) for the configured problem."""
    problem = make_problem(config)
    x0 = np.asarray(problem.x0, float).reshape(1, -1)
    if problem.exact_solution is not None:
        y, z, g = problem.exact_solution(0.0, x0)
        return {
            "kind": "closed-form",
            "problem": problem.name,
            "Y0": float(y[0]),
            "Z0": [float(v) for v in z[0]],
            "Gamma0": [[float(v) for v in row] for row in g[0]],
        }
    if problem.name.startswith("hjb"):
        stream = RngStream(seed=config.seed).child("oracle", problem.name)
        y0, z0, g0, se = hjb_reference(
            problem.dim,
            config.oracle_samples,
            stream,
            horizon=problem.horizon,
            x0=np.asarray(problem.x0, float),
            diffusion_scale=float(problem.diffusion(0.0)[0, 0]),
        )
        return {
            "kind": "monte-carlo",
            "problem": problem.name,
            "samples": config.oracle_samples,
            "Y0": y0,
            "Y0_standard_error": se,
            "Z0": [float(v) for v in z0],
            "Gamma0": [[float(v) for v in row] for row in g0],
        }
    if problem.y0_reference is not None:
        return {"kind": "published-constant", "problem": problem.name, "Y0": problem.y0_reference}
    return {"kind": "none", "problem": problem.name}
