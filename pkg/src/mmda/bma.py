"""Bayesian-model-averaging baseline.

Combines model forecasts by precision weighting and never reads
observations; on any step without data the multi-model filter's fusion
chain produces exactly the same Gaussian, which is the equivalence the
baseline exists to demonstrate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mmda.core import GaussianBelief, InvalidInputError, psd_repair, pseudo_inverse
from mmda.kalman import FusionStep, FusionTrace, _as_problem, forecast

__all__ = ["BmaCombination", "bma_combine", "run_bma"]


@dataclass(frozen=True)
class BmaCombination:
    """Per-model scalar weights (summing to one) and the combined belief."""

    weights: np.ndarray
    combined: GaussianBelief

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if abs(float(np.sum(w)) - 1.0) > 1e-12 or np.any(w < -1e-12):
            raise InvalidInputError("BMA weights must be nonnegative and sum to one")
        object.__setattr__(self, "weights", w)


def bma_combine(models: list[GaussianBelief]) -> BmaCombination:
    """Precision-weighted combination of model forecasts.

    Combined covariance is ``(sum U_m^-1)^-1`` (pseudoinverses throughout)
    and the combined mean weights each model mean by its precision. The
    reported scalar weight per model is the mean diagonal of
    ``W U_m^-1``, which in the scalar case is the precision share.
    """
    if not models:
        raise InvalidInputError("need at least one model belief")
    dim = models[0].dim
    if any(m.dim != dim for m in models):
        raise InvalidInputError("model beliefs must share a dimension")
    precisions = [pseudo_inverse(m.cov) for m in models]
    combined_cov = psd_repair(pseudo_inverse(np.sum(precisions, axis=0)))
    mean = combined_cov @ np.sum([p @ m.mean for p, m in zip(precisions, models)], axis=0)
    combined = GaussianBelief(mean, combined_cov)
    weights = np.array([np.mean(np.diag(combined_cov @ p)) for p in precisions])
    total = float(np.sum(weights))
    if total > 0:
        weights = weights / total
    return BmaCombination(weights=weights, combined=combined)


def run_bma(scenario) -> FusionTrace:
    """Per step: forecast every model from the previous combined state, combine.

    Observations are never read, so the trajectory is identical across data
    noise settings; no randomness is consumed.
    """
    problem = _as_problem(scenario)
    trace = FusionTrace(init=problem.init)
    combined = problem.init
    for k in range(1, problem.n_steps + 1):
        forecasts = [forecast(m, combined, k) for m in problem.models]
        combo = bma_combine(forecasts)
        combined = combo.combined
        trace.steps.append(FusionStep(step=k, forecasts=tuple(forecasts), gains=(),
                                      intermediates=(), analyzed=combined,
                                      observation=None,
                                      model_weights=combo.weights,
                                      data_weight=float("nan")))
    return trace
