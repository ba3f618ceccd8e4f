"""Shared belief algebra: Gaussian states, noise schedules, sampling, pseudoinverse.

Everything downstream (the fusion filters, the ensemble methods, the test
oracles) is built on the small vocabulary defined here: a Gaussian belief
``(mean, cov)``, an observation ``(value, noise, operator)``, a noise
schedule ``Q(t)``, and a handful of numerically-guarded matrix operations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GaussianBelief",
    "NoiseSchedule",
    "Observation",
    "InvalidInputError",
    "NumericalError",
    "keyed_rng",
    "psd_repair",
    "pseudo_inverse",
    "sample_gaussian",
    "mahalanobis_sq",
    "objective",
]

# Default relative cutoff for discarded singular values (relative to sigma_max).
PINV_RTOL = 1e-12

# Covariance validation tolerances: symmetry (relative) and the most negative
# eigenvalue allowed, relative to the largest one.
SYMMETRY_RTOL = 1e-12
EIGEN_FLOOR_RTOL = 1e-10


class InvalidInputError(ValueError):
    """Raised when inputs violate a documented precondition."""


class NumericalError(ArithmeticError):
    """Raised when a numerical procedure fails to produce a usable result."""


def keyed_rng(seed: int, *path: int) -> np.random.Generator:
    """Deterministic generator keyed by ``(seed, *path)``.

    Every stochastic operation in the package derives its generator from the
    scenario seed plus a structural path (step, model index, particle index...),
    so serial and parallel execution orders produce identical streams.
    """
    key = [int(seed)] + [int(p) for p in path]
    if any(k < 0 for k in key):
        raise InvalidInputError(f"rng key entries must be nonnegative, got {key}")
    return np.random.default_rng(np.random.SeedSequence(key))


def _as_matrix(m, name: str = "matrix") -> np.ndarray:
    a = np.atleast_2d(np.asarray(m, dtype=float))
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidInputError(f"{name} must be square, got shape {a.shape}")
    return a


def _as_vector(v, name: str = "vector") -> np.ndarray:
    a = np.atleast_1d(np.asarray(v, dtype=float))
    if a.ndim != 1:
        raise InvalidInputError(f"{name} must be one-dimensional, got shape {a.shape}")
    return a


def check_covariance(cov: np.ndarray, name: str = "cov") -> np.ndarray:
    """Validate symmetry and positive semidefiniteness (up to round-off)."""
    cov = _as_matrix(cov, name)
    if not np.all(np.isfinite(cov)):
        raise InvalidInputError(f"{name} has non-finite entries")
    scale = np.max(np.abs(cov))
    if scale > 0 and np.max(np.abs(cov - cov.T)) > SYMMETRY_RTOL * scale:
        raise InvalidInputError(f"{name} is not symmetric within {SYMMETRY_RTOL} relative")
    eig = np.linalg.eigvalsh(0.5 * (cov + cov.T))
    lam_max = max(eig[-1], 0.0)
    if eig[0] < -EIGEN_FLOOR_RTOL * max(lam_max, 1.0) - 0.0:
        raise InvalidInputError(
            f"{name} is not PSD: min eigenvalue {eig[0]:.3e} vs max {lam_max:.3e}"
        )
    return cov


@dataclass(frozen=True)
class GaussianBelief:
    """A state estimate: mean vector with symmetric PSD covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = _as_vector(self.mean, "mean")
        cov = check_covariance(self.cov, "cov")
        if cov.shape[0] != mean.shape[0]:
            raise InvalidInputError(
                f"mean has length {mean.shape[0]} but cov is {cov.shape}"
            )
        if not np.all(np.isfinite(mean)):
            raise InvalidInputError("mean has non-finite entries")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class NoiseSchedule:
    """Model-error covariance, either constant or indexed by time step.

    ``entries`` holds ``(step, covariance)`` pairs with strictly increasing
    steps; lookup returns the most recent entry at or before the query step.
    """

    entries: tuple = field(default_factory=tuple)
    mode: str = "constant"

    def __post_init__(self):
        if self.mode not in ("constant", "time-indexed"):
            raise InvalidInputError(f"unknown schedule mode {self.mode!r}")
        entries = tuple((int(t), check_covariance(np.asarray(q, dtype=float), "Q"))
                        for t, q in self.entries)
        if self.mode == "constant" and len(entries) != 1:
            raise InvalidInputError("constant schedule needs exactly one entry")
        steps = [t for t, _ in entries]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise InvalidInputError("schedule steps must be strictly increasing")
        if not entries:
            raise InvalidInputError("schedule needs at least one entry")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def constant(cls, q) -> "NoiseSchedule":
        return cls(entries=((0, np.atleast_2d(np.asarray(q, dtype=float))),), mode="constant")

    @classmethod
    def time_indexed(cls, pairs) -> "NoiseSchedule":
        return cls(entries=tuple((t, np.atleast_2d(np.asarray(q, dtype=float)))
                                 for t, q in pairs),
                   mode="time-indexed")

    def at(self, step: int) -> np.ndarray:
        if self.mode == "constant":
            return self.entries[0][1]
        chosen = None
        for t, q in self.entries:
            if t <= step:
                chosen = q
            else:
                break
        if chosen is None:
            raise InvalidInputError(f"schedule has no entry at or before step {step}")
        return chosen


@dataclass(frozen=True)
class Observation:
    """A noisy measurement ``d = H u + eta`` at a simulation step."""

    time: int
    value: np.ndarray
    noise: np.ndarray
    operator: np.ndarray | None = None

    def __post_init__(self):
        value = _as_vector(self.value, "value")
        noise = check_covariance(self.noise, "noise")
        if noise.shape[0] != value.shape[0]:
            raise InvalidInputError("observation value and noise dimensions differ")
        op = self.operator
        if op is None:
            op = np.eye(value.shape[0])
        else:
            op = np.atleast_2d(np.asarray(op, dtype=float))
            if op.shape[0] != value.shape[0]:
                raise InvalidInputError("operator rows must match value length")
        object.__setattr__(self, "value", value)
        object.__setattr__(self, "noise", noise)
        object.__setattr__(self, "operator", op)


def psd_repair(m: np.ndarray) -> np.ndarray:
    """Symmetrize and clamp negative eigenvalues to zero.

    Round-off routinely produces tiny asymmetries and slightly negative
    eigenvalues; filtering code repairs before any factorization.
    """
    m = _as_matrix(m)
    sym = 0.5 * (m + m.T)
    lam, v = np.linalg.eigh(sym)
    if lam[0] >= 0.0:
        return sym
    lam = np.clip(lam, 0.0, None)
    return (v * lam) @ v.T


def pseudo_inverse(m, rel_tol: float = PINV_RTOL) -> np.ndarray:
    """Moore-Penrose pseudoinverse via SVD with relative singular-value cutoff."""
    m = _as_matrix(m)
    if not np.all(np.isfinite(m)):
        raise InvalidInputError("pseudo_inverse: non-finite entries")
    if rel_tol < 0:
        raise InvalidInputError("pseudo_inverse: rel_tol must be nonnegative")
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros_like(m.T)
    inv_s = np.where(s > rel_tol * s[0], 1.0 / np.where(s > 0, s, 1.0), 0.0)
    return (vt.T * inv_s) @ u.T


def sample_gaussian(belief: GaussianBelief, count: int, seed) -> np.ndarray:
    """Draw ``count`` i.i.d. samples from the belief, shape ``(count, dim)``.

    Uses a symmetric eigenfactorization of the (repaired) covariance, so
    singular covariances are handled exactly: zero-variance directions stay
    pinned at the mean. ``seed`` may be an integer or a Generator.
    """
    if count < 1:
        raise InvalidInputError(f"count must be >= 1, got {count}")
    rng = seed if isinstance(seed, np.random.Generator) else keyed_rng(int(seed))
    cov = psd_repair(belief.cov)
    lam, v = np.linalg.eigh(cov)
    lam = np.clip(lam, 0.0, None)
    if not np.all(np.isfinite(lam)):
        raise NumericalError("covariance factorization failed after PSD repair")
    root = v * np.sqrt(lam)
    z = rng.standard_normal((count, belief.dim))
    return belief.mean + z @ root.T


def mahalanobis_sq(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """Squared Mahalanobis distance with pseudo-inverted covariance."""
    x = _as_vector(x, "x")
    mean = _as_vector(mean, "mean")
    if x.shape != mean.shape:
        raise InvalidInputError("mahalanobis_sq: dimension mismatch")
    r = x - mean
    return float(r @ pseudo_inverse(cov) @ r)


def objective(w, u: GaussianBelief, d: Observation) -> float:
    """Assimilation objective: Mahalanobis distance to the prior plus the data.

    ``J(w) = (w - u)' U^-1 (w - u) + (H w - d)' D^-1 (H w - d)``, with
    pseudoinverses standing in for inverses when a covariance is singular.
    """
    w = _as_vector(w, "w")
    if w.shape[0] != u.dim:
        raise InvalidInputError("objective: w and belief dimensions differ")
    h = d.operator
    if h.shape[1] != w.shape[0]:
        raise InvalidInputError("objective: operator columns must match state length")
    prior = mahalanobis_sq(w, u.mean, u.cov)
    data = mahalanobis_sq(h @ w, d.value, d.noise)
    return prior + data
