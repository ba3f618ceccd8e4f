"""Multi-model particle filter with a designated reference model.

The reference model's particles are weighted against the data and against
the other models' ensemble means (Gaussian likelihoods); the combined,
normalized weights drive a systematic resampling of the reference
ensemble, which then reseeds every model's ensemble.

The covariance used for the model-mean likelihood is a policy choice:
``"data"`` (default) compares at the observation-noise scale, making the
other models act like additional observations, which is what makes the
reference-model choice matter; ``"ensemble"`` uses the other model's own
ensemble covariance, which turns the comparison off whenever that model
is noisy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from mmda.core import (
    GaussianBelief,
    InvalidInputError,
    NumericalError,
    Observation,
    keyed_rng,
    pseudo_inverse,
)
from mmda.enkf import Ensemble, enkf_forecast, enkf_init, ensemble_stats
from mmda.kalman import FusionStep, FusionTrace, _as_problem

__all__ = [
    "ParticleCloud",
    "WeightVector",
    "DegenerateWeightsError",
    "pf_forecast",
    "data_weight",
    "model_weight",
    "posterior_weights",
    "systematic_resample_indices",
    "resample",
    "run_mm_pf",
]

logger = logging.getLogger(__name__)

_STREAM_PF_INIT = 10
_STREAM_PF_FORECAST = 11
_STREAM_PF_RESAMPLE = 12


class DegenerateWeightsError(NumericalError):
    """Every combined particle weight vanished or became non-finite."""


@dataclass(frozen=True)
class ParticleCloud:
    """One ensemble per model plus the index of the reference model."""

    ensembles: tuple
    reference: int
    step: int = 0

    def __post_init__(self):
        ens = tuple(self.ensembles)
        if not ens:
            raise InvalidInputError("particle cloud needs at least one ensemble")
        n, dim = ens[0].size, ens[0].dim
        if any(e.size != n or e.dim != dim for e in ens):
            raise InvalidInputError("all ensembles must share size and dimension")
        if not 0 <= self.reference < len(ens):
            raise InvalidInputError(f"reference index {self.reference} out of range")
        object.__setattr__(self, "ensembles", ens)

    @property
    def reference_ensemble(self) -> Ensemble:
        return self.ensembles[self.reference]

    @property
    def size(self) -> int:
        return self.ensembles[0].size


@dataclass(frozen=True)
class WeightVector:
    """Particle weights; ``normalized()`` scales them to sum to one."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if w.ndim != 1:
            raise InvalidInputError("weights must be one-dimensional")
        object.__setattr__(self, "weights", w)

    def normalized(self) -> "WeightVector":
        total = float(np.sum(self.weights))
        if not np.isfinite(total) or total <= 0.0 or np.any(self.weights < 0.0) \
                or not np.all(np.isfinite(self.weights)):
            raise DegenerateWeightsError("weights cannot be normalized")
        return WeightVector(self.weights / total)

    @property
    def size(self) -> int:
        return self.weights.shape[0]


def _gaussian_log_weights(points: np.ndarray, center: np.ndarray,
                          cov: np.ndarray) -> np.ndarray:
    """Unnormalized Gaussian log-density of ``center`` at each point.

    A pseudoinverted covariance restricts the quadratic form to the
    nondegenerate subspace; the normalization constant is shared across
    particles and dropped.
    """
    prec = pseudo_inverse(cov)
    r = points - center
    return -0.5 * np.einsum("ij,jk,ik->i", r, prec, r)


def _shifted_exp(logw: np.ndarray) -> WeightVector:
    # all-(-inf) log-weights turn into NaNs here; normalized() reports them
    with np.errstate(invalid="ignore"):
        return WeightVector(np.exp(logw - np.max(logw)))


def data_weight(reference: Ensemble, d: Observation) -> WeightVector:
    """Weight each reference particle by the likelihood of the observation."""
    h = d.operator
    projected = reference.members @ h.T
    if projected.shape[1] != d.value.shape[0]:
        raise InvalidInputError("observation and ensemble dimensions differ")
    return _shifted_exp(_gaussian_log_weights(projected, d.value, d.noise))


def model_weight(reference: Ensemble, other: Ensemble, u_m: np.ndarray) -> WeightVector:
    """Weight reference particles by the other model's ensemble mean.

    The likelihood is Gaussian with covariance ``u_m`` (the other model's
    ensemble covariance).
    """
    if other.dim != reference.dim:
        raise InvalidInputError("ensemble dimensions differ")
    mean_other = other.members.mean(axis=0)
    return _shifted_exp(_gaussian_log_weights(reference.members, mean_other, u_m))


def posterior_weights(parts: list[WeightVector]) -> WeightVector:
    """Combine per-source weights into normalized posterior particle weights."""
    if not parts:
        raise InvalidInputError("need at least one weight vector")
    n = parts[0].size
    if any(p.size != n for p in parts):
        raise InvalidInputError("weight vectors must share length")
    product = np.ones(n)
    for p in parts:
        product = product * p.weights
    return WeightVector(product).normalized()


def systematic_resample_indices(w: WeightVector, rng: np.random.Generator) -> np.ndarray:
    """Low-variance systematic resampling: one uniform offset, stratified picks."""
    n = w.size
    positions = (rng.uniform() + np.arange(n)) / n
    cum = np.cumsum(w.weights)
    cum[-1] = 1.0  # guard round-off in the last stratum
    return np.searchsorted(cum, positions)


def resample(cloud: ParticleCloud, w: WeightVector, seed) -> ParticleCloud:
    """Redraw every model's ensemble from the reference ensemble.

    Each model performs its own seeded systematic resampling over the
    posterior weights; every output member is a copy of a reference member.
    """
    if abs(float(np.sum(w.weights)) - 1.0) > 1e-9 or np.any(w.weights < 0.0):
        raise InvalidInputError("resample expects normalized weights")
    if w.size != cloud.size:
        raise InvalidInputError("weight vector length must match the ensemble size")
    ref = cloud.reference_ensemble
    new_ensembles = []
    for j, e in enumerate(cloud.ensembles):
        rng = seed if isinstance(seed, np.random.Generator) \
            else keyed_rng(int(seed), _STREAM_PF_RESAMPLE, cloud.step, j)
        idx = systematic_resample_indices(w, rng)
        new_ensembles.append(Ensemble(ref.members[idx], model_id=e.model_id,
                                      step=cloud.step))
    return ParticleCloud(tuple(new_ensembles), reference=cloud.reference,
                         step=cloud.step)


def pf_forecast(cloud: ParticleCloud, models, t: int, seed) -> ParticleCloud:
    """Advance every model's ensemble with its own dynamics and noise draw."""
    if len(models) != len(cloud.ensembles):
        raise InvalidInputError("one model per ensemble required")
    advanced = tuple(
        enkf_forecast(m, e, t,
                      seed if isinstance(seed, np.random.Generator)
                      else keyed_rng(int(seed), _STREAM_PF_FORECAST, t, j))
        for j, (m, e) in enumerate(zip(models, cloud.ensembles))
    )
    return ParticleCloud(advanced, reference=cloud.reference, step=t)


def _cloud_entry(cloud: ParticleCloud, step: int,
                 observation: Observation | None) -> FusionStep:
    stats = [ensemble_stats(e) for e in cloud.ensembles]
    analyzed = stats[cloud.reference]
    return FusionStep(step=step, forecasts=tuple(stats), gains=(),
                      intermediates=(), analyzed=analyzed,
                      observation=observation, model_weights=None,
                      data_weight=float("nan"))


def run_mm_pf(scenario, n: int | None = None, reference=None,
              seed: int | None = None,
              model_weight_cov: str = "data") -> tuple[FusionTrace, list]:
    """Run the multi-model particle filter.

    At observation steps the cloud is forecast, weighted (data likelihood
    plus one term per non-reference model) and resampled; between
    observations it is only forecast. Degenerate weights fall back to a
    uniform resampling with a logged warning. Returns the trace (reference
    ensemble mean and covariance per step) and the per-step clouds' raw
    reference members.
    """
    if model_weight_cov not in ("data", "ensemble"):
        raise InvalidInputError(f"unknown model weight policy {model_weight_cov!r}")
    problem = _as_problem(scenario)
    n = int(n if n is not None else getattr(scenario, "ensemble_size", 0) or 0)
    seed = int(seed if seed is not None else getattr(scenario, "seed", 0) or 0)
    if reference is None:
        reference = getattr(scenario, "reference_model", None)
    if n < 2:
        raise InvalidInputError("particle count must be at least 2")

    if isinstance(reference, str):
        if reference not in problem.model_ids:
            raise InvalidInputError(f"unknown reference model {reference!r}")
        ref_idx = problem.model_ids.index(reference)
    else:
        ref_idx = int(reference or 0)
        if not 0 <= ref_idx < len(problem.models):
            raise InvalidInputError(f"reference index {ref_idx} out of range")

    init_members = enkf_init(problem.init, n, keyed_rng(seed, _STREAM_PF_INIT)).members
    cloud = ParticleCloud(tuple(Ensemble(init_members, model_id=mid, step=0)
                                for mid in problem.model_ids),
                          reference=ref_idx, step=0)

    trace = FusionTrace(init=problem.init)
    reference_members = []
    for k in range(1, problem.n_steps + 1):
        cloud = pf_forecast(cloud, problem.models, k, seed)
        obs = problem.observations.get(k)
        if obs is not None:
            parts = [data_weight(cloud.reference_ensemble, obs)]
            for j, e in enumerate(cloud.ensembles):
                if j == ref_idx:
                    continue
                cov = obs.noise if model_weight_cov == "data" else ensemble_stats(e).cov
                parts.append(model_weight(cloud.reference_ensemble, e, cov))
            try:
                w = posterior_weights(parts)
            except DegenerateWeightsError:
                logger.warning("degenerate particle weights at step %d; "
                               "falling back to uniform", k)
                w = WeightVector(np.full(n, 1.0 / n))
            cloud = resample(cloud, w, seed)
        trace.steps.append(_cloud_entry(cloud, k, obs))
        reference_members.append(cloud.reference_ensemble.members)
    return trace, reference_members
