"""Multi-model sequential data assimilation.

Fuses forecasts from several competing dynamical models with noisy
observations using a sequential multi-model Kalman filter and its
extended, ensemble and particle variants, plus a Bayesian-model-averaging
baseline. Two test beds ship with the package: a harmonic oscillator with
competing integrators and a ponded-infiltration problem with competing
hydrological models.
"""

from mmda.core import (
    GaussianBelief,
    InvalidInputError,
    NoiseSchedule,
    NumericalError,
    Observation,
    keyed_rng,
    objective,
    pseudo_inverse,
    sample_gaussian,
)

__version__ = "0.1.0"

__all__ = [
    "GaussianBelief",
    "NoiseSchedule",
    "Observation",
    "InvalidInputError",
    "NumericalError",
    "keyed_rng",
    "objective",
    "pseudo_inverse",
    "sample_gaussian",
    "__version__",
]
