"""Sequential multi-model Kalman filter and its extended-Kalman variant.

One assimilation step is a chain of standard Kalman updates: the first
model forecast is updated against the data (when present), then every
further model forecast is folded in as if it were another measurement,
with identity measurement operators and pseudoinverted innovation
covariances. Forecast propagation is linear (``A W A' + Q``) or
linearized about the analyzed mean (``G W G' + Q``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from mmda.core import (
    GaussianBelief,
    InvalidInputError,
    NoiseSchedule,
    NumericalError,
    Observation,
    psd_repair,
    pseudo_inverse,
)

__all__ = [
    "LinearModel",
    "DifferentiableModel",
    "FusionStep",
    "FusionTrace",
    "AssimilationProblem",
    "fd_jacobian",
    "kalman_init",
    "fuse_model",
    "assimilate_step",
    "kf_forecast",
    "ekf_forecast",
    "forecast",
    "run_mm_kf",
]

FD_SCALE = 1e-6


@dataclass(frozen=True)
class LinearModel:
    """Linear forecast map ``x -> A x`` with a model-error schedule."""

    matrix: np.ndarray
    noise: NoiseSchedule

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        if a.shape[0] != a.shape[1]:
            raise InvalidInputError(f"model matrix must be square, got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise InvalidInputError("model matrix has non-finite entries")
        object.__setattr__(self, "matrix", a)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class DifferentiableModel:
    """Nonlinear forecast map with an analytic or finite-difference jacobian.

    ``forward_batch``, when given, evaluates the map on an ``(n, dim)``
    stack of states at once; the ensemble methods use it to avoid a Python
    loop over particles.
    """

    forward: Callable[[np.ndarray], np.ndarray]
    noise: NoiseSchedule
    jacobian: Callable[[np.ndarray], np.ndarray] | None = None
    fd_step: float = FD_SCALE
    forward_batch: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if self.jacobian is None and self.fd_step <= 0:
            raise InvalidInputError("finite-difference step must be positive")

    def jacobian_at(self, x: np.ndarray) -> np.ndarray:
        if self.jacobian is not None:
            return np.atleast_2d(np.asarray(self.jacobian(x), dtype=float))
        return fd_jacobian(self.forward, x, self.fd_step)

    def batch(self, states: np.ndarray) -> np.ndarray:
        if self.forward_batch is not None:
            return np.asarray(self.forward_batch(states), dtype=float)
        return np.array([np.atleast_1d(self.forward(s)) for s in states], dtype=float)


def fd_jacobian(g: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                scale: float = FD_SCALE) -> np.ndarray:
    """Central-difference jacobian with per-component step ``scale*max(1,|x_j|)``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    cols = []
    for j in range(x.shape[0]):
        h = scale * max(1.0, abs(x[j]))
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        gp = np.atleast_1d(np.asarray(g(xp), dtype=float))
        gm = np.atleast_1d(np.asarray(g(xm), dtype=float))
        cols.append((gp - gm) / (2.0 * h))
    jac = np.column_stack(cols)
    if not np.all(np.isfinite(jac)):
        raise NumericalError("jacobian evaluation produced non-finite entries")
    return jac


@dataclass(frozen=True)
class FusionStep:
    """Record of one assimilation step: forecasts, gains, chain of updates."""

    step: int
    forecasts: tuple
    gains: tuple
    intermediates: tuple
    analyzed: GaussianBelief
    observation: Observation | None = None
    model_weights: np.ndarray | None = None
    data_weight: float = float("nan")


@dataclass
class FusionTrace:
    """Full filter run: the initial belief plus one record per step."""

    init: GaussianBelief
    steps: list = field(default_factory=list)

    def analyzed_means(self) -> np.ndarray:
        rows = [self.init.mean] + [s.analyzed.mean for s in self.steps]
        return np.array(rows)

    def analyzed_covs(self) -> np.ndarray:
        rows = [self.init.cov] + [s.analyzed.cov for s in self.steps]
        return np.array(rows)

    def __len__(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class AssimilationProblem:
    """Compiled scenario: models, initial belief, observation table, horizon."""

    model_ids: tuple
    models: tuple
    init: GaussianBelief
    observations: dict
    n_steps: int

    def __post_init__(self):
        if len(self.model_ids) != len(self.models):
            raise InvalidInputError("model_ids and models must align")
        if self.n_steps < 1:
            raise InvalidInputError("n_steps must be >= 1")


def _as_problem(scenario) -> AssimilationProblem:
    if isinstance(scenario, AssimilationProblem):
        return scenario
    if hasattr(scenario, "to_problem"):
        return scenario.to_problem()
    raise InvalidInputError(
        f"expected an AssimilationProblem or a Scenario, got {type(scenario).__name__}"
    )


def _update(prior: GaussianBelief, value: np.ndarray, noise: np.ndarray,
            h: np.ndarray) -> tuple[GaussianBelief, np.ndarray]:
    """One Kalman update of ``prior`` against ``(value, noise)`` through ``h``."""
    u, cov = prior.mean, prior.cov
    if h.shape[1] != prior.dim or h.shape[0] != value.shape[0]:
        raise InvalidInputError(
            f"operator {h.shape} incompatible with state dim {prior.dim} "
            f"and value dim {value.shape[0]}"
        )
    innovation_cov = h @ cov @ h.T + noise
    gain = cov @ h.T @ pseudo_inverse(innovation_cov)
    mean = u + gain @ (value - h @ u)
    # Joseph form: algebraically (I - K H) U for the optimal gain, but stays
    # accurate and symmetric when the gain is close to identity.
    i_kh = np.eye(prior.dim) - gain @ h
    post = i_kh @ cov @ i_kh.T + gain @ noise @ gain.T
    return GaussianBelief(mean, psd_repair(post)), gain


def kalman_init(u1: GaussianBelief, d: Observation) -> GaussianBelief:
    """Standard Kalman update of the first model forecast against the data."""
    belief, _ = _update(u1, d.value, d.noise, d.operator)
    return belief


def fuse_model(w_prev: GaussianBelief, u_m: GaussianBelief) -> tuple[GaussianBelief, np.ndarray]:
    """Fold one more model forecast into the analyzed state (identity operator)."""
    if u_m.dim != w_prev.dim:
        raise InvalidInputError(
            f"cannot fuse beliefs of dimension {w_prev.dim} and {u_m.dim}"
        )
    return _update(w_prev, u_m.mean, u_m.cov, np.eye(w_prev.dim))


def _source_weights(analyzed: GaussianBelief, forecasts: Sequence[GaussianBelief],
                    observation: Observation | None) -> tuple[np.ndarray, float]:
    """Diagnostic per-source weights: mean diagonal of ``W_M @ U_m^+``.

    In the scalar case these are precision shares and sum to one across all
    fused sources (models plus data).
    """
    w_cov = analyzed.cov
    weights = np.array([np.mean(np.diag(w_cov @ pseudo_inverse(f.cov)))
                        for f in forecasts])
    data_weight = float("nan")
    if observation is not None:
        h = observation.operator
        if h.shape[0] == h.shape[1] and np.allclose(h, np.eye(h.shape[0])):
            data_weight = float(np.mean(np.diag(w_cov @ pseudo_inverse(observation.noise))))
    return weights, data_weight


def assimilate_step(models: Sequence[GaussianBelief],
                    data: Observation | None = None,
                    step: int = 0) -> FusionStep:
    """One full assimilation: data update on model 1, then pairwise fusion.

    Without data the chain is seeded with the first model's belief; without
    models the data belief itself is returned (identity operator only).
    """
    models = list(models)
    if not models and data is None:
        raise InvalidInputError("assimilate_step needs at least one model or one observation")

    gains: list = []
    intermediates: list[GaussianBelief] = []

    if not models:
        h = data.operator
        if not (h.shape[0] == h.shape[1] and np.allclose(h, np.eye(h.shape[0]))):
            raise InvalidInputError("data-only assimilation requires an identity operator")
        analyzed = GaussianBelief(data.value, data.noise)
        return FusionStep(step=step, forecasts=(), gains=(None,),
                          intermediates=(analyzed,), analyzed=analyzed,
                          observation=data, model_weights=np.array([]),
                          data_weight=1.0)

    if data is not None:
        current, gain = _update(models[0], data.value, data.noise, data.operator)
        rest = models[1:]
    else:
        current, gain = models[0], None
        rest = models[1:]
    gains.append(gain)
    intermediates.append(current)

    for u_m in rest:
        current, gain = fuse_model(current, u_m)
        gains.append(gain)
        intermediates.append(current)

    weights, data_weight = _source_weights(current, models, data)
    return FusionStep(step=step, forecasts=tuple(models), gains=tuple(gains),
                      intermediates=tuple(intermediates), analyzed=current,
                      observation=data, model_weights=weights,
                      data_weight=data_weight)


def _propagate_cov(g: np.ndarray, cov: np.ndarray, q: np.ndarray,
                   form: str) -> np.ndarray:
    if form == "sandwich":
        out = g @ cov @ g.T + q
    elif form == "gram":
        # Alternative ordering g g' W; coincides with the sandwich form only
        # when g and W commute (always in the scalar case).
        out = g @ g.T @ cov + q
    else:
        raise InvalidInputError(f"unknown covariance form {form!r}")
    return psd_repair(out)


def kf_forecast(model: LinearModel, analyzed: GaussianBelief, t: int,
                form: str = "sandwich") -> GaussianBelief:
    """Propagate mean and covariance through a linear model: ``A w``, ``A W A' + Q``."""
    a = model.matrix
    if a.shape[1] != analyzed.dim:
        raise InvalidInputError("model and state dimensions differ")
    q = model.noise.at(t)
    return GaussianBelief(a @ analyzed.mean, _propagate_cov(a, analyzed.cov, q, form))


def ekf_forecast(model: DifferentiableModel, analyzed: GaussianBelief, t: int,
                 form: str = "sandwich") -> GaussianBelief:
    """Propagate through a nonlinear model, linearized about the analyzed mean."""
    mean = np.atleast_1d(np.asarray(model.forward(analyzed.mean), dtype=float))
    g = model.jacobian_at(analyzed.mean)
    if g.shape != (mean.shape[0], analyzed.dim):
        raise InvalidInputError(
            f"jacobian shape {g.shape} incompatible with map {analyzed.dim}->{mean.shape[0]}"
        )
    q = model.noise.at(t)
    return GaussianBelief(mean, _propagate_cov(g, analyzed.cov, q, form))


def forecast(model, analyzed: GaussianBelief, t: int) -> GaussianBelief:
    """Dispatch on the model kind (linear vs differentiable)."""
    if isinstance(model, LinearModel):
        return kf_forecast(model, analyzed, t)
    if isinstance(model, DifferentiableModel):
        return ekf_forecast(model, analyzed, t)
    raise InvalidInputError(f"unsupported model type {type(model).__name__}")


def run_mm_kf(scenario) -> FusionTrace:
    """Run the sequential multi-model filter over a compiled scenario.

    Every step forecasts all models from the previous analyzed state, then
    assimilates: with the scheduled observation when one exists, otherwise
    by model-only fusion. Deterministic: no randomness is consumed here.
    """
    problem = _as_problem(scenario)
    trace = FusionTrace(init=problem.init)
    analyzed = problem.init
    for k in range(1, problem.n_steps + 1):
        forecasts = [forecast(m, analyzed, k) for m in problem.models]
        obs = problem.observations.get(k)
        entry = assimilate_step(forecasts, obs, step=k)
        trace.steps.append(entry)
        analyzed = entry.analyzed
    return trace
