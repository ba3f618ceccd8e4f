"""Harmonic-oscillator test bed: exact solution and two competing integrators.

The system is ``y'' + w^2 y = 0`` written first-order in ``(y, y')``. Two
imperfect models compete: a Crank-Nicolson (trapezoidal) integrator with a
large step and the correct frequency, and a classical RK4 integrator with a
small step but a wrong frequency. Both pollute the state with additive
Gaussian noise after every integrator step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mmda.core import GaussianBelief, InvalidInputError, NoiseSchedule, keyed_rng
from mmda.kalman import LinearModel

__all__ = [
    "OscillatorParams",
    "IntegratorSpec",
    "OscillatorModel",
    "exact_solution",
    "cn_matrix",
    "rk4_matrix",
    "cn_step",
    "rk4_step",
    "accumulated_pollution",
    "interval_model",
    "make_oscillator_models",
    "simulate_path",
    "DEFAULT_CADENCE",
    "DEFAULT_DATA_NOISE_VAR",
]

# Paper-setup defaults: data every 0.6 time units with variance 0.01.
DEFAULT_CADENCE = 0.6
DEFAULT_DATA_NOISE_VAR = 0.01


@dataclass(frozen=True)
class OscillatorParams:
    """Angular frequency and initial conditions of the oscillator."""

    w: float = 2.0
    y0: float = 1.0
    y0p: float = 1.0

    def __post_init__(self):
        if self.w <= 0:
            raise InvalidInputError("angular frequency must be positive")


@dataclass(frozen=True)
class IntegratorSpec:
    """Scheme, internal time step and per-step pollution variance."""

    scheme: str
    dt: float
    pollution_var: float = 0.0

    def __post_init__(self):
        if self.scheme not in ("cn", "rk4"):
            raise InvalidInputError(f"unknown scheme {self.scheme!r}")
        if self.dt <= 0:
            raise InvalidInputError("dt must be positive")
        if self.pollution_var < 0:
            raise InvalidInputError("pollution variance must be nonnegative")


def exact_solution(p: OscillatorParams, t: float) -> np.ndarray:
    """Closed-form state ``(y, y')`` at time ``t``."""
    c, s = np.cos(p.w * t), np.sin(p.w * t)
    return np.array([p.y0 * c + (p.y0p / p.w) * s,
                     -p.w * p.y0 * s + p.y0p * c])


def cn_matrix(w: float, dt: float) -> np.ndarray:
    """One trapezoidal step of ``z' = A z`` as an explicit 2x2 matrix.

    ``(I - dt/2 A) z+ = (I + dt/2 A) z`` solved in closed form; the scheme
    exactly preserves the quadratic invariant ``w^2 y^2 + y'^2``.
    """
    h = 0.5 * dt
    det = 1.0 + (h * w) ** 2
    inv = np.array([[1.0, h], [-h * w * w, 1.0]]) / det
    fwd = np.array([[1.0, h], [-h * w * w, 1.0]])
    return inv @ fwd


def rk4_matrix(w: float, dt: float) -> np.ndarray:
    """One classical RK4 step of ``z' = A z`` as its exact matrix polynomial."""
    a = np.array([[0.0, 1.0], [-w * w, 0.0]])
    m = np.eye(2)
    term = np.eye(2)
    for k in (1, 2, 3, 4):
        term = term @ a * (dt / k)
        m = m + term
    return m


def cn_step(p: OscillatorParams, state, dt: float) -> np.ndarray:
    """Advance ``(y, y')`` by one Crank-Nicolson step."""
    if dt <= 0:
        raise InvalidInputError("dt must be positive")
    return cn_matrix(p.w, dt) @ np.asarray(state, dtype=float)


def rk4_step(p: OscillatorParams, state, dt: float) -> np.ndarray:
    """Advance ``(y, y')`` by one classical RK4 step."""
    if dt <= 0:
        raise InvalidInputError("dt must be positive")
    z = np.asarray(state, dtype=float)

    def f(s):
        return np.array([s[1], -p.w * p.w * s[0]])

    k1 = f(z)
    k2 = f(z + 0.5 * dt * k1)
    k3 = f(z + 0.5 * dt * k2)
    k4 = f(z + dt * k3)
    return z + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _step_matrix(spec: IntegratorSpec, w: float) -> np.ndarray:
    return cn_matrix(w, spec.dt) if spec.scheme == "cn" else rk4_matrix(w, spec.dt)


def accumulated_pollution(step_m: np.ndarray, var: float, n_steps: int) -> np.ndarray:
    """Covariance at the end of ``n_steps`` noisy steps.

    Noise of covariance ``var*I`` enters after every step, so earlier draws
    are propagated through the remaining step matrices:
    ``Q = sum_j M^j (var I) (M^j)'`` for ``j = 0..n_steps-1``.
    """
    q = np.zeros((2, 2))
    if var == 0.0:
        return q
    prop = np.eye(2)
    for _ in range(n_steps):
        q += var * (prop @ prop.T)
        prop = step_m @ prop
    return q


@dataclass(frozen=True)
class OscillatorModel:
    """A competing oscillator model resolved to the assimilation cadence."""

    id: str
    w: float
    spec: IntegratorSpec
    steps_per_interval: int
    model: LinearModel


def interval_model(model_id: str, w: float, spec: IntegratorSpec,
                   cadence: float) -> OscillatorModel:
    """Compose integrator steps into one forecast map per assimilation interval."""
    ratio = cadence / spec.dt
    n = int(round(ratio))
    if n < 1 or abs(ratio - n) > 1e-9:
        raise InvalidInputError(
            f"cadence {cadence} is not a multiple of integrator dt {spec.dt}"
        )
    step_m = _step_matrix(spec, w)
    phi = np.linalg.matrix_power(step_m, n)
    q = accumulated_pollution(step_m, spec.pollution_var, n)
    return OscillatorModel(id=model_id, w=w, spec=spec, steps_per_interval=n,
                           model=LinearModel(phi, NoiseSchedule.constant(q)))


def make_oscillator_models(cadence: float = DEFAULT_CADENCE,
                           cn_dt: float = 0.3, cn_w: float = 2.0,
                           rk4_dt: float = 0.02, rk4_w: float = 2.1,
                           pollution_var: float = 0.1
                           ) -> tuple[OscillatorModel, OscillatorModel]:
    """The two competing models of the oscillator study.

    Defaults: CN at dt 0.3 with the true frequency, RK4 at dt 0.02 with a
    wrong frequency (2.1), both polluted with variance 0.1 per step; data
    arrives every 0.6 time units (2 CN steps, 30 RK4 steps).
    """
    cn = interval_model("cn", cn_w, IntegratorSpec("cn", cn_dt, pollution_var), cadence)
    rk4 = interval_model("rk4", rk4_w, IntegratorSpec("rk4", rk4_dt, pollution_var), cadence)
    return cn, rk4


def simulate_path(om: OscillatorModel, z0, n_intervals: int, seed: int,
                  stream: int = 0) -> np.ndarray:
    """Open-loop sample path at interval resolution, shape ``(n_intervals+1, 2)``.

    Noise is added after every integrator step, matching the model's
    accumulated-pollution covariance in distribution.
    """
    step_m = _step_matrix(om.spec, om.w)
    sd = np.sqrt(om.spec.pollution_var)
    z = np.asarray(z0, dtype=float).copy()
    out = [z.copy()]
    rng = keyed_rng(seed, stream)
    for _ in range(n_intervals):
        for _ in range(om.steps_per_interval):
            z = step_m @ z
            if sd > 0.0:
                z = z + rng.normal(0.0, sd, size=2)
        out.append(z.copy())
    return np.array(out)
