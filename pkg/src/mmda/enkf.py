"""Ensemble (Monte Carlo) variant of the multi-model assimilation.

Each model carries an ensemble of forecasts; sample covariances replace
the propagated ones, and every ensemble member runs the same fusion chain
as the exact filter against a freshly perturbed copy of the observation.
Because the chain is linear and all members share the same gains, the
per-member updates are applied as one matrix operation; a test pins this
fast path to the member-by-member definition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mmda.core import (
    GaussianBelief,
    InvalidInputError,
    Observation,
    keyed_rng,
    psd_repair,
    pseudo_inverse,
    sample_gaussian,
)
from mmda.kalman import DifferentiableModel, FusionStep, FusionTrace, LinearModel, _as_problem

__all__ = [
    "Ensemble",
    "enkf_init",
    "enkf_forecast",
    "ensemble_stats",
    "assimilate_ensembles",
    "run_mm_enkf",
]

# rng stream tags so draws for different purposes never collide
_STREAM_INIT = 0
_STREAM_FORECAST = 1
_STREAM_DATA = 2


@dataclass(frozen=True)
class Ensemble:
    """A stack of state vectors for one model at one step."""

    members: np.ndarray
    model_id: str = ""
    step: int = 0

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.members, dtype=float))
        if m.shape[0] < 2:
            raise InvalidInputError("an ensemble needs at least 2 members")
        if not np.all(np.isfinite(m)):
            raise InvalidInputError("ensemble members must be finite")
        object.__setattr__(self, "members", m)

    @property
    def size(self) -> int:
        return self.members.shape[0]

    @property
    def dim(self) -> int:
        return self.members.shape[1]


def enkf_init(initial: GaussianBelief, n: int, seed, model_id: str = "",
              stream: int = _STREAM_INIT) -> Ensemble:
    """Draw the initial ensemble from the prior belief."""
    if n < 2:
        raise InvalidInputError("ensemble size must be at least 2")
    rng = seed if isinstance(seed, np.random.Generator) else keyed_rng(int(seed), stream)
    return Ensemble(sample_gaussian(initial, n, rng), model_id=model_id, step=0)


def _model_noise_draws(model, t: int, n: int, dim: int, rng) -> np.ndarray:
    q = model.noise.at(t)
    if not np.any(q):
        return np.zeros((n, dim))
    lam, v = np.linalg.eigh(psd_repair(q))
    root = v * np.sqrt(np.clip(lam, 0.0, None))
    return rng.standard_normal((n, dim)) @ root.T


def enkf_forecast(model, analyzed: Ensemble, t: int, seed,
                  stream: int = _STREAM_FORECAST) -> Ensemble:
    """Advance every member through the model and add a model-error draw."""
    rng = seed if isinstance(seed, np.random.Generator) else keyed_rng(int(seed), stream, t)
    if isinstance(model, LinearModel):
        if model.dim != analyzed.dim:
            raise InvalidInputError("model and ensemble dimensions differ")
        propagated = analyzed.members @ model.matrix.T
    elif isinstance(model, DifferentiableModel):
        propagated = model.batch(analyzed.members)
        if propagated.shape != analyzed.members.shape:
            raise InvalidInputError("model changed the ensemble dimensions")
    else:
        raise InvalidInputError(f"unsupported model type {type(model).__name__}")
    eps = _model_noise_draws(model, t, analyzed.size, analyzed.dim, rng)
    return Ensemble(propagated + eps, model_id=analyzed.model_id, step=t)


def ensemble_stats(e: Ensemble) -> GaussianBelief:
    """Sample mean and unbiased sample covariance of an ensemble."""
    mean = e.members.mean(axis=0)
    centered = e.members - mean
    cov = centered.T @ centered / (e.size - 1)
    return GaussianBelief(mean, psd_repair(cov))


def _chain_gains(model_covs, data_cov):
    """Gains of the fusion chain for shared covariances.

    Mirrors the exact filter: a data update on model 1 (identity operator),
    then one fuse per remaining model. Returns the per-stage gains plus the
    final analyzed covariance.
    """
    dim = model_covs[0].shape[0]
    eye = np.eye(dim)
    gains = []
    if data_cov is not None:
        k = model_covs[0] @ pseudo_inverse(model_covs[0] + data_cov)
        i_k = eye - k
        w_cov = psd_repair(i_k @ model_covs[0] @ i_k.T + k @ data_cov @ k.T)
    else:
        k = None
        w_cov = model_covs[0]
    gains.append(k)
    for u_cov in model_covs[1:]:
        k = w_cov @ pseudo_inverse(w_cov + u_cov)
        i_k = eye - k
        w_cov = psd_repair(i_k @ w_cov @ i_k.T + k @ u_cov @ k.T)
        gains.append(k)
    return gains, w_cov


def assimilate_ensembles(forecasts: list[Ensemble], data: Observation | None,
                         seed, step: int) -> tuple[np.ndarray, FusionStep]:
    """Per-member fusion of the model ensembles with perturbed observations.

    Every member i runs the exact filter's chain on its own forecasts
    ``{u_m^i}`` and a perturbed copy ``d + eta^i`` of the data; covariances
    (and therefore gains) are shared ensemble statistics.
    """
    if not forecasts:
        raise InvalidInputError("need at least one model ensemble")
    n, dim = forecasts[0].size, forecasts[0].dim
    if any(e.size != n or e.dim != dim for e in forecasts):
        raise InvalidInputError("ensembles must share size and dimension")

    stats = [ensemble_stats(e) for e in forecasts]
    covs = [s.cov for s in stats]
    if data is not None:
        h = data.operator
        if not (h.shape[0] == h.shape[1] and np.allclose(h, np.eye(h.shape[0]))):
            raise InvalidInputError("ensemble assimilation supports identity operators only")
        rng = seed if isinstance(seed, np.random.Generator) else keyed_rng(int(seed), _STREAM_DATA, step)
        lam, v = np.linalg.eigh(psd_repair(data.noise))
        root = v * np.sqrt(np.clip(lam, 0.0, None))
        perturbed = data.value + rng.standard_normal((n, dim)) @ root.T
        gains, w_cov = _chain_gains(covs, data.noise)
        members = forecasts[0].members + (perturbed - forecasts[0].members) @ gains[0].T
    else:
        gains, w_cov = _chain_gains(covs, None)
        members = forecasts[0].members.copy()
    for e, k in zip(forecasts[1:], gains[1:]):
        members = members + (e.members - members) @ k.T

    analyzed_belief = GaussianBelief(members.mean(axis=0), w_cov)
    weights = np.array([np.mean(np.diag(w_cov @ pseudo_inverse(c))) for c in covs])
    data_weight = float("nan")
    if data is not None:
        data_weight = float(np.mean(np.diag(w_cov @ pseudo_inverse(data.noise))))
    entry = FusionStep(step=step, forecasts=tuple(stats), gains=tuple(gains),
                       intermediates=(), analyzed=analyzed_belief,
                       observation=data, model_weights=weights,
                       data_weight=data_weight)
    return members, entry


def run_mm_enkf(scenario, n: int | None = None, seed: int | None = None) -> tuple[FusionTrace, list]:
    """Run the ensemble filter; returns the trace and per-step analyzed ensembles.

    The trace's analyzed beliefs hold ensemble means with the chain's
    analyzed covariance; the returned list carries the raw member arrays.
    """
    problem = _as_problem(scenario)
    n = int(n if n is not None else getattr(scenario, "ensemble_size", 0) or 0)
    seed = int(seed if seed is not None else getattr(scenario, "seed", 0) or 0)
    if n < 2:
        raise InvalidInputError("ensemble size must be at least 2")

    # one shared analyzed ensemble at t=0; every model forecasts from it
    init_members = enkf_init(problem.init, n, keyed_rng(seed, _STREAM_INIT)).members
    ensembles = [Ensemble(init_members, model_id=mid, step=0) for mid in problem.model_ids]
    trace = FusionTrace(init=problem.init)
    analyzed_members = []
    for k in range(1, problem.n_steps + 1):
        forecasts = [
            enkf_forecast(m, e, k, keyed_rng(seed, _STREAM_FORECAST, k, j))
            for j, (m, e) in enumerate(zip(problem.models, ensembles))
        ]
        members, entry = assimilate_ensembles(forecasts, problem.observations.get(k),
                                              keyed_rng(seed, _STREAM_DATA, k), step=k)
        trace.steps.append(entry)
        analyzed_members.append(members)
        ensembles = [Ensemble(members, model_id=mid, step=k) for mid in problem.model_ids]
    return trace, analyzed_members
