"""Experiment harness: scenarios, truth provisioning, calibration, metrics.

A Scenario is a declarative description (usually loaded from TOML) of one
experiment: which competing models run, where the truth comes from, the
observation schedule, the filter, and the seeds. ``run_experiment``
compiles it, dispatches to the chosen filter and packages trajectories,
weights and error metrics for the CLI and the figure scripts.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from mmda import infiltration as infil
from mmda.bma import run_bma
from mmda.core import (
    GaussianBelief,
    InvalidInputError,
    NoiseSchedule,
    Observation,
    keyed_rng,
)
from mmda.enkf import run_mm_enkf
from mmda.kalman import AssimilationProblem, DifferentiableModel, run_mm_kf
from mmda.oscillator import (
    OscillatorModel,
    OscillatorParams,
    exact_solution,
    interval_model,
    IntegratorSpec,
    simulate_path,
)
from mmda.pf import run_mm_pf

__all__ = [
    "ConfigurationError",
    "ModelConfig",
    "TruthConfig",
    "ObservationConfig",
    "Scenario",
    "ErrorCalibration",
    "PdfEstimate",
    "ResultBundle",
    "load_scenario",
    "generate_observations",
    "calibrate_model_errors",
    "run_experiment",
    "monte_carlo_infiltration",
    "heterogeneous_pdf_study",
    "histogram_pdf",
    "rmse",
    "write_results_csv",
    "write_metrics_json",
]

FILTERS = ("mmkf", "ekf", "enkf", "pf", "bma")

_STREAM_OBS = 20
_STREAM_OPEN_LOOP = 21
_STREAM_MC = 22
_STREAM_HETERO = 23


class ConfigurationError(InvalidInputError):
    """A scenario or schedule is internally inconsistent."""


@dataclass(frozen=True)
class ModelConfig:
    """One competing model as declared in a scenario file."""

    id: str
    kind: str                       # cn | rk4 | green_ampt | parlange
    dt: float
    w: float = 2.0                  # oscillator frequency
    pollution_var: float = 0.0      # oscillator per-step noise variance
    error: str = "calibrated-white"  # infiltration: calibrated-white |
    #                                 calibrated-time-dependent | fixed
    variance: float = 1e-4          # infiltration fixed error variance

    def __post_init__(self):
        if self.kind not in ("cn", "rk4", "green_ampt", "parlange"):
            raise ConfigurationError(f"unknown model kind {self.kind!r}")
        if self.dt <= 0:
            raise ConfigurationError(f"model {self.id}: dt must be positive")
        if self.error not in ("calibrated-white", "calibrated-time-dependent", "fixed"):
            raise ConfigurationError(f"model {self.id}: unknown error mode {self.error!r}")


@dataclass(frozen=True)
class TruthConfig:
    """Where the reference trajectory comes from."""

    kind: str = "surrogate"         # oscillator-exact | file | surrogate
    path: str = ""
    w: float = 2.0
    y0: float = 1.0
    y0p: float = 1.0
    model: str = "parlange"
    ks_scale: float = 0.7
    alpha_scale: float = 0.45
    dt: float = 0.005

    def __post_init__(self):
        if self.kind not in ("oscillator-exact", "file", "surrogate"):
            raise ConfigurationError(f"unknown truth kind {self.kind!r}")


@dataclass(frozen=True)
class ObservationConfig:
    """Equi-spaced observation schedule: every k-th grid step (0 disables data)."""

    every: int = 1
    noise_var: float = 0.0

    def __post_init__(self):
        if self.every < 0:
            raise ConfigurationError("observation cadence must be nonnegative")
        if self.noise_var < 0:
            raise ConfigurationError("observation noise variance must be nonnegative")


@dataclass(frozen=True)
class Scenario:
    """Declarative experiment description."""

    name: str
    kind: str                       # oscillator | infiltration
    filter: str
    models: tuple
    truth: TruthConfig = TruthConfig()
    observations: ObservationConfig = ObservationConfig()
    grid_dt: float = 1.0
    n_steps: int = 10
    t0: float = 0.0
    seed: int = 0
    ensemble_size: int = 1000
    reference_model: str = ""
    init_cov: float = 1e-4
    soil: infil.SoilParams = infil.BET_DAGAN
    calibration_window: tuple | None = None
    hetero: dict = field(default_factory=dict)  # pdf-study settings (CLI `pdf`)

    def __post_init__(self):
        if self.kind not in ("oscillator", "infiltration"):
            raise ConfigurationError(f"unknown scenario kind {self.kind!r}")
        if self.filter not in FILTERS:
            raise ConfigurationError(f"unknown filter {self.filter!r}")
        if not self.models:
            raise ConfigurationError("scenario needs at least one model")
        ids = [m.id for m in self.models]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("model ids must be unique")
        if self.n_steps < 1 or self.grid_dt <= 0:
            raise ConfigurationError("need n_steps >= 1 and grid_dt > 0")
        for m in self.models:
            if self.kind == "oscillator":
                ratio = self.grid_dt / m.dt
                if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
                    raise ConfigurationError(
                        f"model {m.id}: grid step {self.grid_dt} is not a "
                        f"multiple of integrator dt {m.dt}")
        if self.filter in ("enkf", "pf") and self.ensemble_size < 2:
            raise ConfigurationError(f"filter {self.filter} needs ensemble_size >= 2")
        if self.filter == "pf":
            if self.reference_model and self.reference_model not in ids:
                raise ConfigurationError(
                    f"reference model {self.reference_model!r} is not one of {ids}")

    @property
    def dim(self) -> int:
        return 2 if self.kind == "oscillator" else 1

    def times(self) -> np.ndarray:
        return self.t0 + self.grid_dt * np.arange(self.n_steps + 1)

    # -- truth -----------------------------------------------------------

    def truth_series(self) -> np.ndarray:
        """Reference trajectory on the assimilation grid, shape (n+1, dim)."""
        return _truth_series_cached(self.truth, self.soil, self.t0,
                                    self.grid_dt, self.n_steps, self.dim).copy()

    # -- models ----------------------------------------------------------

    def _oscillator_models(self) -> list[OscillatorModel]:
        return [interval_model(m.id, m.w, IntegratorSpec(m.kind, m.dt, m.pollution_var),
                               self.grid_dt)
                for m in self.models]

    def open_loop_means(self) -> dict:
        """Deterministic (noise-free) model trajectories from the truth start."""
        cached = _open_loop_cached(self.kind, self.models, self.truth, self.soil,
                                   self.t0, self.grid_dt, self.n_steps, self.dim)
        return {k: v.copy() for k, v in cached.items()}

    def open_loop_paths(self, seed: int | None = None) -> dict:
        """Stochastic open-loop paths (oscillator pollution; deterministic otherwise)."""
        seed = self.seed if seed is None else seed
        if self.kind != "oscillator":
            return self.open_loop_means()
        truth0 = self.truth_series()[0]
        return {om.id: simulate_path(om, truth0, self.n_steps,
                                     seed=seed, stream=_STREAM_OPEN_LOOP + j)
                for j, om in enumerate(self._oscillator_models())}

    def model_noise_schedules(self) -> dict:
        """Model-error covariance per model: declared or calibrated against truth."""
        out = {}
        if self.kind == "oscillator":
            for om in self._oscillator_models():
                out[om.id] = om.model.noise
            return out
        needs_truth = any(m.error.startswith("calibrated") for m in self.models)
        runs = self.open_loop_means() if needs_truth else {}
        truth = self.truth_series() if needs_truth else None
        for m in self.models:
            if m.error == "fixed":
                out[m.id] = NoiseSchedule.constant([[m.variance]])
            else:
                mode = "white" if m.error == "calibrated-white" else "time-dependent"
                cal = calibrate_model_errors({m.id: runs[m.id]}, truth, mode,
                                             window=self.calibration_window)
                out[m.id] = cal.schedules[m.id]
        return out

    def build_models(self) -> tuple[tuple, tuple]:
        """Model ids plus filter-ready model objects."""
        if self.kind == "oscillator":
            oms = self._oscillator_models()
            return tuple(m.id for m in oms), tuple(m.model for m in oms)
        schedules = self.model_noise_schedules()
        ids, models = [], []
        for m in self.models:
            ids.append(m.id)
            models.append(_infiltration_model(m.kind, self.soil, self.grid_dt,
                                              m.dt, schedules[m.id]))
        return tuple(ids), tuple(models)

    # -- compilation -----------------------------------------------------

    def observation_table(self, seed: int | None = None,
                          noise_var: float | None = None) -> dict:
        obs_list = generate_observations(
            self.truth_series(),
            ObservationConfig(self.observations.every,
                              self.observations.noise_var if noise_var is None else noise_var),
            self.seed if seed is None else seed)
        return {o.time: o for o in obs_list}

    def initial_belief(self) -> GaussianBelief:
        truth0 = self.truth_series()[0]
        return GaussianBelief(truth0, self.init_cov * np.eye(self.dim))

    def to_problem(self, seed: int | None = None,
                   noise_var: float | None = None) -> AssimilationProblem:
        ids, models = self.build_models()
        observations = {} if self.filter == "bma" else self.observation_table(seed, noise_var)
        return AssimilationProblem(model_ids=ids, models=models,
                                   init=self.initial_belief(),
                                   observations=observations,
                                   n_steps=self.n_steps)

    def with_overrides(self, **kw) -> "Scenario":
        data = {f: getattr(self, f) for f in self.__dataclass_fields__}
        data.update({k: v for k, v in kw.items() if v is not None})
        return Scenario(**data)


@lru_cache(maxsize=64)
def _truth_series_cached(cfg: TruthConfig, soil: infil.SoilParams, t0: float,
                         grid_dt: float, n_steps: int, dim: int) -> np.ndarray:
    times = t0 + grid_dt * np.arange(n_steps + 1)
    if cfg.kind == "oscillator-exact":
        p = OscillatorParams(w=cfg.w, y0=cfg.y0, y0p=cfg.y0p)
        return np.array([exact_solution(p, tk) for tk in times])
    if cfg.kind == "surrogate":
        params = soil.with_values(soil.ks * cfg.ks_scale, soil.alpha * cfg.alpha_scale)
        i = infil.initial_rate_batch(cfg.model, t0, params)
        rows = [float(i[0])]
        for _ in range(n_steps):
            i = infil.advance_rate_batch(cfg.model, i, grid_dt, params, dt=cfg.dt)
            rows.append(float(i[0]))
        return np.array(rows)[:, None]
    return _load_truth_table(cfg.path, times, dim)


@lru_cache(maxsize=64)
def _open_loop_cached(kind: str, models: tuple, truth_cfg: TruthConfig,
                      soil: infil.SoilParams, t0: float, grid_dt: float,
                      n_steps: int, dim: int) -> dict:
    truth0 = _truth_series_cached(truth_cfg, soil, t0, grid_dt, n_steps, dim)[0]
    out = {}
    if kind == "oscillator":
        for m in models:
            om = interval_model(m.id, m.w, IntegratorSpec(m.kind, m.dt, m.pollution_var),
                                grid_dt)
            z, rows = truth0.copy(), [truth0.copy()]
            for _ in range(n_steps):
                z = om.model.matrix @ z
                rows.append(z.copy())
            out[m.id] = np.array(rows)
    else:
        for m in models:
            i = np.array([max(truth0[0], soil.ks * (1 + 1e-9))])
            rows = [i.copy()]
            for _ in range(n_steps):
                i = infil.advance_rate_batch(m.kind, i, grid_dt, soil, dt=m.dt)
                rows.append(i.copy())
            out[m.id] = np.array(rows)
    return out


def _infiltration_model(kind: str, soil: infil.SoilParams, interval: float,
                        dt: float, noise: NoiseSchedule) -> DifferentiableModel:
    floor = soil.ks * (1.0 + 1e-9)

    def fwd(x):
        x = np.maximum(np.atleast_1d(np.asarray(x, dtype=float)), floor)
        return infil.advance_rate_batch(kind, x, interval, soil, dt=dt)

    def fwd_batch(xs):
        x = np.maximum(xs[:, 0], floor)
        return infil.advance_rate_batch(kind, x, interval, soil, dt=dt)[:, None]

    return DifferentiableModel(fwd, noise, forward_batch=fwd_batch)


def _load_truth_table(path: str, times: np.ndarray, dim: int) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"truth table not found: {path}")
    with p.open() as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = [[float(v) for v in r] for r in reader if r]
    header = [h.strip() for h in header]
    if header[:2] == ["t_min", "i_cm_per_min"]:
        width = 1
    elif header[:3] == ["t", "y", "yprime"]:
        width = 2
    else:
        raise ConfigurationError(
            f"unrecognized truth table header {header} in {path}")
    if width != dim:
        raise ConfigurationError(
            f"truth table {path} has state dimension {width}, scenario needs {dim}")
    table_t = np.array([r[0] for r in rows])
    table_v = np.array([r[1:1 + width] for r in rows])
    out = np.empty((times.shape[0], width))
    for k, tk in enumerate(times):
        hits = np.nonzero(np.abs(table_t - tk) < 1e-6)[0]
        if hits.size == 0:
            raise ConfigurationError(
                f"truth table {path} has no entry at t={tk:.6g}")
        out[k] = table_v[hits[0]]
    return out


# -- schedule / calibration operations ----------------------------------


def generate_observations(truth: np.ndarray, schedule: ObservationConfig,
                          seed: int) -> list[Observation]:
    """Sample the truth series at the schedule's cadence and perturb it."""
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    if truth.shape[0] == 1:
        truth = truth.T
    n_steps = truth.shape[0] - 1
    if schedule.every == 0:
        return []
    if schedule.every > n_steps:
        raise ConfigurationError(
            f"observation cadence {schedule.every} exceeds the horizon {n_steps}")
    dim = truth.shape[1]
    noise_cov = schedule.noise_var * np.eye(dim)
    sd = math.sqrt(schedule.noise_var)
    out = []
    for k in range(schedule.every, n_steps + 1, schedule.every):
        rng = keyed_rng(seed, _STREAM_OBS, k)
        eta = rng.normal(0.0, sd, dim) if sd > 0 else np.zeros(dim)
        out.append(Observation(k, truth[k] + eta, noise_cov))
    return out


@dataclass(frozen=True)
class ErrorCalibration:
    """Calibrated model-error variances: one constant or one value per step."""

    mode: str
    values: dict                    # model id -> float (white) or np.ndarray (per step)
    schedules: dict = field(default_factory=dict)


def calibrate_model_errors(model_runs: dict, truth: np.ndarray, mode: str,
                           window: tuple | None = None) -> ErrorCalibration:
    """Variance of each model's open-loop error against the truth.

    ``white`` averages the squared error over the (sub)window into one
    constant; ``time-dependent`` keeps the per-step squared deviations.
    Errors are pooled over state components.
    """
    if mode not in ("white", "time-dependent"):
        raise ConfigurationError(f"unknown calibration mode {mode!r}")
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    if truth.shape[0] == 1:
        truth = truth.T
    values, schedules = {}, {}
    for mid, run in model_runs.items():
        run = np.atleast_2d(np.asarray(run, dtype=float))
        if run.shape[0] == 1:
            run = run.T
        if run.shape != truth.shape:
            raise ConfigurationError(
                f"model {mid}: run shape {run.shape} does not match truth {truth.shape}")
        sq = np.mean((run - truth) ** 2, axis=1)  # per step, pooled over components
        lo, hi = (1, truth.shape[0] - 1) if window is None else window
        if not (0 <= lo <= hi < truth.shape[0]):
            raise ConfigurationError(f"calibration window {(lo, hi)} out of range")
        if mode == "white":
            v = float(np.mean(sq[lo:hi + 1]))
            values[mid] = v
            schedules[mid] = NoiseSchedule.constant([[v]])
        else:
            steps = np.arange(lo, hi + 1)
            values[mid] = sq[lo:hi + 1].copy()
            schedules[mid] = NoiseSchedule.time_indexed(
                [(int(k), [[float(sq[k])]]) for k in steps])
    return ErrorCalibration(mode=mode, values=values, schedules=schedules)


# -- metrics and PDFs ----------------------------------------------------


def rmse(series_a, series_b, at=None) -> float:
    """Root-mean-square difference, pooled over components.

    ``at`` restricts the comparison to the given row indices (typically
    observation steps).
    """
    a = np.atleast_1d(np.asarray(series_a, dtype=float))
    b = np.atleast_1d(np.asarray(series_b, dtype=float))
    if a.shape != b.shape:
        raise ConfigurationError(f"series shapes differ: {a.shape} vs {b.shape}")
    if at is not None:
        idx = np.asarray(list(at), dtype=int)
        if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
            raise ConfigurationError("rmse subset indices out of range")
        a, b = a[idx], b[idx]
    return float(np.sqrt(np.mean((a - b) ** 2)))


@dataclass(frozen=True)
class PdfEstimate:
    """Histogram density: uniform bin edges and normalized heights."""

    edges: np.ndarray
    heights: np.ndarray

    @property
    def bin_width(self) -> float:
        return float(self.edges[1] - self.edges[0])

    def integral(self) -> float:
        return float(np.sum(self.heights) * self.bin_width)

    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])


def histogram_pdf(samples, bins: int = 30, bin_width: float | None = None) -> PdfEstimate:
    """Normalized histogram: height = count / (n * bin width)."""
    x = np.atleast_1d(np.asarray(samples, dtype=float))
    if x.size < 2:
        raise InvalidInputError("need at least 2 samples for a PDF estimate")
    lo, hi = float(np.min(x)), float(np.max(x))
    if bin_width is not None:
        if bin_width <= 0:
            raise InvalidInputError("bin width must be positive")
        if hi == lo:
            edges = np.array([lo - 0.5 * bin_width, lo + 0.5 * bin_width])
        else:
            n_bins = int(np.ceil((hi - lo) / bin_width))
            edges = lo + bin_width * np.arange(n_bins + 1)
    else:
        if bins < 1:
            raise InvalidInputError("bin count must be positive")
        if hi == lo:
            edges = np.array([lo - 0.5, lo + 0.5])
        else:
            edges = np.linspace(lo, hi, bins + 1)
    counts, edges = np.histogram(x, bins=edges)
    width = edges[1] - edges[0]
    heights = counts / (x.size * width)
    return PdfEstimate(edges=edges, heights=heights)


# -- experiment driver ---------------------------------------------------


@dataclass
class ResultBundle:
    """Everything one experiment produced, ready for CSV/JSON export."""

    scenario: Scenario
    times: np.ndarray
    truth: np.ndarray
    observations: dict
    model_means: dict
    model_vars: dict
    analyzed_means: np.ndarray
    analyzed_vars: np.ndarray
    weights: dict
    data_weights: np.ndarray
    metrics: dict


def run_experiment(scenario: Scenario, seed: int | None = None) -> ResultBundle:
    """Compile the scenario, run its filter, collect trajectories and metrics."""
    seed = scenario.seed if seed is None else seed
    scenario = scenario.with_overrides(seed=seed)
    problem = scenario.to_problem()
    try:
        if scenario.filter in ("mmkf", "ekf"):
            trace = run_mm_kf(problem)
        elif scenario.filter == "enkf":
            trace, _ = run_mm_enkf(problem, n=scenario.ensemble_size, seed=seed)
        elif scenario.filter == "pf":
            ref = scenario.reference_model or scenario.models[0].id
            trace, _ = run_mm_pf(problem, n=scenario.ensemble_size,
                                 reference=ref, seed=seed)
        else:
            trace = run_bma(problem)
    except Exception as exc:
        raise type(exc)(f"scenario {scenario.name!r}: {exc}") from exc

    times = scenario.times()
    truth = scenario.truth_series()
    ids = list(problem.model_ids)
    n, dim = scenario.n_steps, scenario.dim

    model_means = {mid: np.full((n + 1, dim), np.nan) for mid in ids}
    model_vars = {mid: np.full((n + 1, dim), np.nan) for mid in ids}
    weights = {mid: np.full(n + 1, np.nan) for mid in ids}
    data_weights = np.full(n + 1, np.nan)
    analyzed_means = trace.analyzed_means()
    analyzed_vars = np.array([np.diag(c) for c in trace.analyzed_covs()])
    for step in trace.steps:
        k = step.step
        for j, mid in enumerate(ids):
            if step.forecasts:
                model_means[mid][k] = step.forecasts[j].mean
                model_vars[mid][k] = np.diag(step.forecasts[j].cov)
            if step.model_weights is not None and step.model_weights.size > j:
                weights[mid][k] = step.model_weights[j]
        data_weights[k] = step.data_weight

    obs_steps = sorted(problem.observations)
    observations = {k: problem.observations[k].value for k in obs_steps}
    open_loop = scenario.open_loop_paths(seed)
    metrics = {
        "scenario": scenario.name,
        "filter": scenario.filter,
        "seed": seed,
        "n_steps": n,
        "observation_steps": [int(k) for k in obs_steps],
        "rmse_analyzed_all": rmse(analyzed_means, truth),
        "rmse_analyzed_obs": rmse(analyzed_means, truth, at=obs_steps) if obs_steps else float("nan"),
        "rmse_open_loop_obs": {
            mid: (rmse(open_loop[mid], truth, at=obs_steps) if obs_steps else float("nan"))
            for mid in ids},
        "rmse_forecast_obs": {
            mid: (rmse(model_means[mid], truth, at=obs_steps) if obs_steps else float("nan"))
            for mid in ids},
    }
    return ResultBundle(scenario=scenario, times=times, truth=truth,
                        observations=observations, model_means=model_means,
                        model_vars=model_vars, analyzed_means=analyzed_means,
                        analyzed_vars=analyzed_vars, weights=weights,
                        data_weights=data_weights, metrics=metrics)


# -- heterogeneous-soil Monte Carlo --------------------------------------


def monte_carlo_infiltration(n: int, t_eval: float, seed: int,
                             soil: infil.SoilParams = infil.BET_DAGAN,
                             models: tuple = ("green_ampt", "parlange"),
                             t0: float = 0.1, dt: float = 0.01,
                             ks_scale: float = 1.0, alpha_scale: float = 1.0,
                             threads: int = 1) -> dict:
    """Propagate lognormal soil-parameter draws through each model.

    Draws ``ln Ks ~ N(ln_ks_mean, ln_ks_var)`` and ``ln alpha`` likewise
    (variances from the soil description), treats each draw as a random
    constant, and integrates each model to ``t_eval``. Failed samples are
    skipped and counted. Returns per-model rate samples plus the draws.
    """
    if n < 1:
        raise InvalidInputError("need at least one Monte Carlo sample")
    rng = keyed_rng(seed, _STREAM_MC)
    ks = np.exp(rng.normal(soil.ln_ks_mean, math.sqrt(soil.ln_ks_var), n)) * ks_scale
    alpha = np.exp(rng.normal(soil.ln_alpha_mean, math.sqrt(soil.ln_alpha_var), n)) * alpha_scale

    def one_model(kind: str):
        i0 = infil.initial_rate_batch(kind, t0, soil, ks=ks, alpha=alpha)
        chunks = np.array_split(np.arange(n), max(1, min(16, n)))

        def advance(idx):
            return infil.advance_rate_batch(kind, i0[idx], t_eval - t0, soil,
                                            ks=ks[idx], alpha=alpha[idx],
                                            dt=dt, t_start=t0)

        samples = np.full(n, np.nan)
        skipped = 0
        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            results = list(pool.map(lambda idx: _try_advance(advance, idx), chunks))
        for idx, res in zip(chunks, results):
            if res is not None:
                samples[idx] = res
                continue
            for j in idx:  # chunk failed: salvage sample by sample
                try:
                    samples[j] = infil.advance_rate_batch(
                        kind, i0[j:j + 1], t_eval - t0, soil,
                        ks=ks[j:j + 1], alpha=alpha[j:j + 1], dt=dt, t_start=t0)[0]
                except Exception:
                    skipped += 1
        return samples[np.isfinite(samples)], skipped

    out = {"ks": ks, "alpha": alpha, "samples": {}, "skipped": {}}
    for kind in models:
        samples, skipped = one_model(kind)
        out["samples"][kind] = samples
        out["skipped"][kind] = skipped
    return out


def _try_advance(advance, idx):
    try:
        return advance(idx)
    except Exception:
        return None


def heterogeneous_pdf_study(n_mc: int = 2000, n_particles: int = 1000,
                            t_eval: float = 5.0, seed: int = 0,
                            obs_noise_sd: float = 0.002,
                            reference: str = "green_ampt",
                            soil: infil.SoilParams = infil.BET_DAGAN,
                            truth: TruthConfig = TruthConfig(),
                            bins: int = 40, threads: int = 1) -> dict:
    """One-step particle-filter assimilation of heterogeneous-soil forecasts.

    The "true" rate distribution comes from the surrogate model under the
    same lognormal parameter draws; the observation is its mean plus noise.
    Each reduced model contributes an ensemble of ``n_particles`` forecasts
    at ``t_eval``; the reference ensemble is weighted against the data and
    the other model's mean, then resampled.
    """
    from mmda.enkf import Ensemble
    from mmda.pf import ParticleCloud, WeightVector, data_weight, model_weight, \
        posterior_weights, resample

    mc = monte_carlo_infiltration(n_mc, t_eval, seed, soil=soil, threads=threads)
    truth_mc = monte_carlo_infiltration(
        n_mc, t_eval, seed + 1, soil=soil, models=(truth.model,),
        ks_scale=truth.ks_scale, alpha_scale=truth.alpha_scale,
        threads=threads)["samples"][truth.model]
    rng = keyed_rng(seed, _STREAM_HETERO)
    obs_value = float(np.mean(truth_mc) + rng.normal(0.0, obs_noise_sd))
    obs = Observation(0, [obs_value], [[obs_noise_sd ** 2]])

    pf_draws = monte_carlo_infiltration(n_particles, t_eval, seed + 2, soil=soil,
                                        threads=threads)["samples"]
    model_ids = list(mc["samples"])
    ensembles = tuple(Ensemble(pf_draws[mid][:, None], model_id=mid)
                      for mid in model_ids)
    ref_idx = model_ids.index(reference)
    cloud = ParticleCloud(ensembles, reference=ref_idx)
    parts = [data_weight(cloud.reference_ensemble, obs)]
    for j, e in enumerate(cloud.ensembles):
        if j != ref_idx:
            parts.append(model_weight(cloud.reference_ensemble, e, obs.noise))
    try:
        w = posterior_weights(parts)
    except Exception:
        w = WeightVector(np.full(n_particles, 1.0 / n_particles))
    assimilated = resample(cloud, w, seed).reference_ensemble.members[:, 0]

    samples = dict(mc["samples"])
    samples["assimilated"] = assimilated
    samples["truth"] = truth_mc
    return {
        "samples": samples,
        "observation": obs_value,
        "pdfs": {k: histogram_pdf(v, bins=bins) for k, v in samples.items()},
        "skipped": mc["skipped"],
    }


# -- serialization -------------------------------------------------------


def _fmt(x: float) -> str:
    return "" if not np.isfinite(x) else repr(float(x))


def write_results_csv(bundle: ResultBundle, path) -> None:
    """Documented results schema: one row per grid step."""
    dim = bundle.scenario.dim
    ids = list(bundle.model_means)
    header = ["step", "t"]
    header += [f"truth_{j}" for j in range(dim)]
    header += [f"obs_{j}" for j in range(dim)]
    for mid in ids:
        header += [f"model_{mid}_mean_{j}" for j in range(dim)]
        header += [f"model_{mid}_var_{j}" for j in range(dim)]
    header += [f"analyzed_mean_{j}" for j in range(dim)]
    header += [f"analyzed_var_{j}" for j in range(dim)]
    header += [f"weight_{mid}" for mid in ids] + ["weight_data"]
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(header)
        for k in range(bundle.scenario.n_steps + 1):
            row = [str(k), repr(float(bundle.times[k]))]
            row += [_fmt(v) for v in bundle.truth[k]]
            obs = bundle.observations.get(k)
            row += [_fmt(v) for v in obs] if obs is not None else [""] * dim
            for mid in ids:
                row += [_fmt(v) for v in bundle.model_means[mid][k]]
                row += [_fmt(v) for v in bundle.model_vars[mid][k]]
            row += [_fmt(v) for v in bundle.analyzed_means[k]]
            row += [_fmt(v) for v in bundle.analyzed_vars[k]]
            row += [_fmt(bundle.weights[mid][k]) for mid in ids]
            row.append(_fmt(bundle.data_weights[k]))
            wr.writerow(row)


def write_metrics_json(bundle: ResultBundle, path) -> None:
    with open(path, "w") as f:
        json.dump(bundle.metrics, f, indent=2, sort_keys=True)
        f.write("\n")


# -- TOML loading --------------------------------------------------------


def _pop(d: dict, key, default=None):
    return d.pop(key) if key in d else default


def load_scenario(path) -> Scenario:
    """Parse and validate a scenario TOML file."""
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"scenario file not found: {path}")
    with p.open("rb") as f:
        try:
            raw = tomllib.load(f)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"invalid TOML in {path}: {exc}") from exc
    try:
        models = tuple(ModelConfig(**m) for m in raw.pop("models", []))
        truth_raw = raw.pop("truth", {})
        if "path" in truth_raw and truth_raw["path"]:
            truth_raw["path"] = str((p.parent / truth_raw["path"]).resolve()) \
                if not Path(truth_raw["path"]).is_absolute() else truth_raw["path"]
        truth = TruthConfig(**truth_raw)
        observations = ObservationConfig(**raw.pop("observations", {}))
        soil_raw = raw.pop("soil", {})
        soil = infil.SoilParams(**soil_raw) if soil_raw else infil.BET_DAGAN
        return Scenario(models=models, truth=truth, observations=observations,
                        soil=soil, **raw)
    except TypeError as exc:
        raise ConfigurationError(f"bad scenario field in {path}: {exc}") from exc
