"""Ponded-infiltration test bed: Green-Ampt and Parlange models.

Both models describe the infiltration rate ``i(t)`` (cm/min) into soil
under a constant ponded head. Each exists in two equivalent forms: an
implicit algebraic relation between ``i`` (or the wetting-front depth)
and ``t``, and the ODE obtained by differentiating it. The ODE form is
what the filters propagate; the implicit form serves as an oracle.

Units are cm and minutes throughout, matching the Bet-Dagan soil defaults.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate as _sint
from scipy.special import gamma as _gamma

from mmda.core import InvalidInputError, NumericalError

__all__ = [
    "SoilParams",
    "InfiltrationState",
    "SingularityError",
    "van_genuchten",
    "wetting_front_head",
    "a_of_m",
    "sorptivity_sq",
    "green_ampt_implicit",
    "green_ampt_rhs",
    "parlange_rhs",
    "parlange_time",
    "parlange_initial_rate",
    "integrate_infiltration",
    "advance_rate_batch",
    "initial_rate_batch",
    "BET_DAGAN",
]

POLE_TOL = 1e-3
MAX_HALVINGS = 48


class SingularityError(NumericalError):
    """An ODE right-hand side hit a vanishing denominator."""


@dataclass(frozen=True)
class SoilParams:
    """Hydraulic soil description (Bet-Dagan defaults).

    ``ln_ks_*`` and ``ln_alpha_*`` are the lognormal statistics of the
    saturated conductivity and the van Genuchten alpha; homogeneous runs
    use the point values ``ks`` and ``alpha``, which default to the
    exponentiated ln-means.
    """

    ln_ks_mean: float = -3.58
    ln_ks_var: float = 0.89
    ln_alpha_mean: float = -3.01
    ln_alpha_var: float = 0.63
    phi: float = 0.42
    theta_i: float = 0.13
    theta_init: float = 0.13
    psi0: float = 1.0
    psi_j: float = 2.0
    n: float = 1.81
    ks: float = None  # type: ignore[assignment]
    alpha: float = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.ks is None:
            object.__setattr__(self, "ks", math.exp(self.ln_ks_mean))
        if self.alpha is None:
            object.__setattr__(self, "alpha", math.exp(self.ln_alpha_mean))
        if not (0.0 < self.theta_i <= self.theta_init < self.phi < 1.0):
            raise InvalidInputError(
                "need 0 < theta_i <= theta_init < phi < 1, got "
                f"theta_i={self.theta_i}, theta_init={self.theta_init}, phi={self.phi}"
            )
        if self.n <= 1.0:
            raise InvalidInputError("van Genuchten n must exceed 1")
        if self.psi0 < 0.0:
            raise InvalidInputError("ponded head psi0 must be nonnegative")
        if self.psi_j <= 0.0:
            raise InvalidInputError("pressure jump psi_j must be positive")
        if self.ks <= 0.0 or self.alpha <= 0.0:
            raise InvalidInputError("ks and alpha must be positive")

    @property
    def m(self) -> float:
        return 1.0 - 1.0 / self.n

    @property
    def moisture_deficit(self) -> float:
        return self.phi - self.theta_init

    def with_values(self, ks: float, alpha: float) -> "SoilParams":
        return SoilParams(ln_ks_mean=self.ln_ks_mean, ln_ks_var=self.ln_ks_var,
                          ln_alpha_mean=self.ln_alpha_mean, ln_alpha_var=self.ln_alpha_var,
                          phi=self.phi, theta_i=self.theta_i, theta_init=self.theta_init,
                          psi0=self.psi0, psi_j=self.psi_j, n=self.n,
                          ks=float(ks), alpha=float(alpha))


BET_DAGAN = SoilParams()


@dataclass(frozen=True)
class InfiltrationState:
    """Infiltration rate at a time, with the wetting-front depth when defined."""

    i: float
    t: float
    x_f: float = float("nan")


def van_genuchten(psi, alpha: float, n: float):
    """Relative conductivity and moisture ratio at pressure head ``psi``.

    Returns ``(K_r, theta_ratio)`` with ``psi_d = alpha*|psi|``:
    ``K_r = [1 - psi_d^(mn) (1+psi_d^n)^-m]^2 / (1+psi_d^n)^(m/2)`` and
    ``theta_ratio = (1+psi_d^n)^-m``. Both lie in [0, 1]. Accepts arrays.
    """
    if alpha <= 0 or n <= 1:
        raise InvalidInputError("van Genuchten needs alpha > 0 and n > 1")
    m = 1.0 - 1.0 / n
    psi_d = alpha * np.abs(np.asarray(psi, dtype=float))
    base = 1.0 + psi_d ** n
    theta_ratio = base ** (-m)
    kr = (1.0 - psi_d ** (m * n) * base ** (-m)) ** 2 / base ** (m / 2.0)
    if np.isscalar(psi) or np.ndim(psi) == 0:
        return float(kr), float(theta_ratio)
    return kr, theta_ratio


def wetting_front_head(params: SoilParams, kr=None) -> float:
    """Capillary-drive wetting-front head: ``-(integral of K_r over psi < 0)``.

    Adaptive quadrature on the half line (scipy's QAGI transform), absolute
    tolerance 1e-8. A custom relative-conductivity function ``kr(psi)`` may
    replace the van Genuchten default.
    """
    if kr is None:
        def kr(psi):
            return van_genuchten(psi, params.alpha, params.n)[0]
    val, err = _sint.quad(lambda x: kr(-x), 0.0, np.inf, epsabs=1e-8, limit=200)
    if not np.isfinite(val) or err > 1e-6:
        raise NumericalError(f"capillary-drive quadrature failed (err={err:.2e})")
    return -val


@lru_cache(maxsize=32)
def _unit_capillary_integral(n: float) -> float:
    """``integral of K_r(psi_d) d(psi_d)`` for alpha = 1; scales as 1/alpha."""
    val, err = _sint.quad(lambda u: van_genuchten(-u, 1.0, n)[0], 0.0, np.inf,
                          epsabs=1e-10, limit=400)
    if not np.isfinite(val) or err > 1e-8:
        raise NumericalError("unit capillary quadrature failed")
    return val


def _psi_f_fast(alpha, n: float):
    """Wetting-front head via the exact substitution ``psi_f(alpha) = psi_f(1)/alpha``."""
    return -_unit_capillary_integral(float(n)) / np.asarray(alpha, dtype=float)


_GAMMA_ARGS = (
    lambda m: 1.0 - m,
    lambda m: 1.5 * m - 1.0,
    lambda m: 0.5 * m,
    lambda m: m + 1.0,
    lambda m: 2.5 * m,
    lambda m: 2.5 * m - 1.0,
    lambda m: 1.5 * m,
    lambda m: 3.5 * m,
)


def a_of_m(m: float) -> float:
    """Six-term Gamma-function constant entering the sorptivity.

    Evaluated exactly as printed. Arguments of the Gamma function may be
    negative non-integers (they are for the Bet-Dagan ``m``), which flips
    signs of individual terms; a warning flags that regime. Parameter sets
    within 1e-3 of a pole (a Gamma argument at a non-positive integer, or
    the rational terms' poles at m = 2/3 and m = 2/5) are rejected.
    """
    if not 0.0 < m < 1.0:
        raise InvalidInputError(f"m must lie in (0, 1), got {m}")
    for branch in (2.0 / 3.0, 2.0 / 5.0):
        if abs(m - branch) < POLE_TOL:
            raise InvalidInputError(f"m={m} is within {POLE_TOL} of the pole at {branch}")
    negative = False
    for arg_of in _GAMMA_ARGS:
        g = arg_of(m)
        if g < 0.0:
            negative = True
        nearest = round(g)
        if nearest <= 0 and abs(g - nearest) < POLE_TOL:
            raise InvalidInputError(
                f"Gamma argument {g:.6f} within {POLE_TOL} of a pole (m={m})"
            )
    if negative:
        warnings.warn(
            f"a_of_m: negative Gamma argument at m={m:.6f}; individual terms "
            "change sign in this regime", RuntimeWarning, stacklevel=2)
    g = _gamma
    return float(
        g(1 - m) * g(1.5 * m - 1) / g(0.5 * m)
        - 4.0 / (3 * m - 2)
        + g(m + 1) * g(1.5 * m - 1) / g(2.5 * m)
        + g(1 - m) * g(2.5 * m - 1) / g(1.5 * m)
        - 4.0 / (5 * m - 2)
        + g(m + 1) * g(2.5 * m - 1) / g(3.5 * m)
    )


def sorptivity_sq(params: SoilParams) -> float:
    """Squared sorptivity ``S^2 = (Ks/alpha)(phi - theta_init)(1 - m)A(m)``."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        a = a_of_m(params.m)
    s2 = (params.ks / params.alpha) * params.moisture_deficit * (1.0 - params.m) * a
    if s2 <= 0.0:
        raise NumericalError(f"nonpositive squared sorptivity {s2} at m={params.m}")
    return s2


def _safeguarded_newton(f, df, lo: float, hi: float, tol: float = 1e-10,
                        max_iter: int = 200) -> float:
    """Newton iteration confined to a sign-changing bracket, bisecting on escape."""
    flo, fhi = f(lo), f(hi)
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if flo * fhi > 0.0:
        raise NumericalError(f"root not bracketed on [{lo}, {hi}]")
    x = 0.5 * (lo + hi)
    for _ in range(max_iter):
        fx = f(x)
        if fx == 0.0:
            return x
        if flo * fx < 0.0:
            hi = x
        else:
            lo, flo = x, fx
        d = df(x)
        step_ok = d != 0.0
        if step_ok:
            x_new = x - fx / d
            step_ok = lo < x_new < hi
        if not step_ok:
            x_new = 0.5 * (lo + hi)
        if abs(x_new - x) <= tol * max(1.0, abs(x_new)):
            return x_new
        x = x_new
    raise NumericalError("root solve failed to converge")


def green_ampt_implicit(params: SoilParams, t: float) -> InfiltrationState:
    """Wetting-front depth and infiltration rate from the implicit relation.

    Solves ``x_f - dpsi*ln(1 + x_f/dpsi) = Ks t/(phi - theta_init)`` for the
    front depth (the left side is strictly increasing), then evaluates
    ``i = -Ks (psi_f - x_f - psi0)/x_f``.
    """
    if t <= 0.0:
        raise InvalidInputError("implicit solution needs t > 0")
    psi_f = wetting_front_head(params)
    dpsi = params.psi0 - psi_f
    rhs = params.ks * t / params.moisture_deficit

    def f(x):
        return x - dpsi * math.log1p(x / dpsi) - rhs

    def df(x):
        return x / (dpsi + x)

    hi = rhs + 50.0 * dpsi
    while f(hi) < 0.0:
        hi *= 2.0
    x_f = _safeguarded_newton(f, df, 1e-12, hi, tol=1e-10)
    i = -params.ks * (psi_f - x_f - params.psi0) / x_f
    return InfiltrationState(i=i, t=t, x_f=x_f)


def green_ampt_rhs(params: SoilParams, i: float) -> float:
    """Rate of change of the Green-Ampt infiltration rate.

    ``di/dt = -i (i - Ks)^2 / [Ks (phi - theta_init)(psi0 - psi_f)]``; the
    boundary ``i = Ks`` is the fixed point and returns exactly zero.
    """
    if i < params.ks:
        raise InvalidInputError(f"rate {i} below the saturated conductivity {params.ks}")
    if i == params.ks:
        return 0.0
    psi_f = wetting_front_head(params)
    return -i * (i - params.ks) ** 2 / (
        params.ks * params.moisture_deficit * (params.psi0 - psi_f))


def parlange_time(params: SoilParams, i) -> float:
    """Time at which the Parlange model attains infiltration rate ``i``."""
    ks = params.ks
    dth = params.moisture_deficit
    s2 = sorptivity_sq(params)
    i = np.asarray(i, dtype=float)
    t = (ks * (params.psi0 + params.psi_j) * dth / ((i - ks) * ks)
         - (s2 - 2.0 * params.psi_j * ks * dth) / (2.0 * ks * i)
         + (s2 - 2.0 * ks * dth * (params.psi0 + 2.0 * params.psi_j))
         / (2.0 * ks * ks) * np.log1p(ks / (i - ks)))
    return float(t) if t.ndim == 0 else t


def parlange_rhs(params: SoilParams, i: float) -> float:
    """Rate of change of the Parlange infiltration rate.

    ``di/dt = 2 i^2 (i-Ks)^2 / [S^2 (Ks-i) - 2 Ks (phi-theta_init)(psi0 i + psi_j Ks)]``.
    """
    ks = params.ks
    if i < ks:
        raise InvalidInputError(f"rate {i} below the saturated conductivity {ks}")
    if i == ks:
        return 0.0
    s2 = sorptivity_sq(params)
    dth = params.moisture_deficit
    den = s2 * (ks - i) - 2.0 * ks * dth * (params.psi0 * i + params.psi_j * ks)
    scale = s2 * max(i, ks) + 2.0 * ks * dth * (params.psi0 * i + params.psi_j * ks)
    if abs(den) < 1e-12 * scale:
        raise SingularityError(f"vanishing denominator at rate {i}")
    return 2.0 * i * i * (i - ks) ** 2 / den


def parlange_initial_rate(params: SoilParams, t0: float) -> float:
    """Invert the implicit Parlange relation for the rate at ``t0``."""
    if t0 <= 0.0:
        raise InvalidInputError("initial time must be positive")
    ks = params.ks

    def f(i):
        return parlange_time(params, i) - t0

    lo = ks * (1.0 + 1e-12)
    hi = 2.0 * ks
    while f(hi) > 0.0:
        hi *= 2.0
        if hi > 1e12 * ks:
            raise NumericalError("could not bracket the initial Parlange rate")

    def df(i):
        return 1.0 / parlange_rhs(params, i)

    return _safeguarded_newton(f, df, lo, hi, tol=1e-12)


def _batch_rhs(kind: str, params: SoilParams, ks, psi_f, s2):
    """Vectorized ODE right-hand side over a sample axis; no domain guards."""
    dth = params.moisture_deficit
    if kind == "green_ampt":
        denom = ks * dth * (params.psi0 - psi_f)

        def rhs(i):
            return -i * (i - ks) ** 2 / denom
    elif kind == "parlange":
        def rhs(i):
            den = s2 * (ks - i) - 2.0 * ks * dth * (params.psi0 * i + params.psi_j * ks)
            with np.errstate(divide="ignore", invalid="ignore"):
                return 2.0 * i * i * (i - ks) ** 2 / den
    else:
        raise InvalidInputError(f"unknown infiltration model {kind!r}")
    return rhs


def _rk4_guarded(rhs, i, h, floor, depth: int = 0, t_hint: float = float("nan")):
    """One RK4 step on every lane; invalid lanes are retried with two half steps."""
    k1 = rhs(i)
    k2 = rhs(i + 0.5 * h * k1)
    k3 = rhs(i + 0.5 * h * k2)
    k4 = rhs(i + h * k3)
    out = i + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    bad = ~np.isfinite(out) | (out <= floor) | (out > i)
    if np.any(bad):
        if depth >= MAX_HALVINGS:
            raise NumericalError(
                f"integration failed for {int(np.sum(bad))} sample(s) near t={t_hint}")
        half = _rk4_guarded(rhs, i[bad], 0.5 * h,
                            floor[bad] if np.ndim(floor) else floor,
                            depth + 1, t_hint)
        sub_floor = floor[bad] if np.ndim(floor) else floor
        out = out.copy()
        out[bad] = _rk4_guarded(rhs, half, 0.5 * h, sub_floor, depth + 1, t_hint)
    return out


def advance_rate_batch(kind: str, i, duration: float, params: SoilParams,
                       ks=None, alpha=None, dt: float = 0.01,
                       t_start: float = float("nan")) -> np.ndarray:
    """Advance an array of infiltration rates by ``duration`` minutes.

    Per-sample ``ks``/``alpha`` arrays override the point values in
    ``params`` (heterogeneous-soil Monte Carlo); scalars handle ensembles
    over a single soil. RK4 with step ``dt``, subdividing any step that
    would push a lane to or below its saturated conductivity.
    """
    i = np.atleast_1d(np.asarray(i, dtype=float)).copy()
    ks = np.asarray(params.ks if ks is None else ks, dtype=float)
    alpha = np.asarray(params.alpha if alpha is None else alpha, dtype=float)
    psi_f = _psi_f_fast(alpha, params.n)
    if kind == "parlange":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            a = a_of_m(params.m)
        s2 = ks / alpha * params.moisture_deficit * (1.0 - params.m) * a
    else:
        s2 = None
    rhs = _batch_rhs(kind, params, ks, psi_f, s2)
    floor = ks * (1.0 + 1e-13)
    i = np.maximum(i, ks * (1.0 + 1e-9))

    n_full, rem = divmod(duration, dt)
    steps = [dt] * int(round(n_full))
    if rem > 1e-12 * max(duration, dt):
        steps.append(rem)
    t = 0.0
    for h in steps:
        i = _rk4_guarded(rhs, i, h, floor, t_hint=t_start + t)
        t += h
    return i


def initial_rate_batch(kind: str, t0: float, params: SoilParams,
                       ks=None, alpha=None) -> np.ndarray:
    """Vectorized initial rates at ``t0`` from each model's implicit relation."""
    ks = np.atleast_1d(np.asarray(params.ks if ks is None else ks, dtype=float))
    alpha = np.atleast_1d(np.asarray(params.alpha if alpha is None else alpha, dtype=float))
    ks, alpha = np.broadcast_arrays(ks, alpha)
    dth = params.moisture_deficit
    if kind == "green_ampt":
        psi_f = _psi_f_fast(alpha, params.n)
        dpsi = params.psi0 - psi_f
        rhs_val = ks * t0 / dth

        def f(x):
            return x - dpsi * np.log1p(x / dpsi) - rhs_val

        lo = np.full_like(ks, 1e-12)
        hi = rhs_val + 50.0 * dpsi
        grow = f(hi) < 0.0
        while np.any(grow):
            hi = np.where(grow, hi * 2.0, hi)
            grow = f(hi) < 0.0
        for _ in range(90):
            mid = 0.5 * (lo + hi)
            neg = f(mid) < 0.0
            lo = np.where(neg, mid, lo)
            hi = np.where(neg, hi, mid)
        x_f = 0.5 * (lo + hi)
        return ks * (x_f + params.psi0 - psi_f) / x_f
    if kind == "parlange":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            a = a_of_m(params.m)
        s2 = ks / alpha * dth * (1.0 - params.m) * a

        def t_of(i):
            return (ks * (params.psi0 + params.psi_j) * dth / ((i - ks) * ks)
                    - (s2 - 2.0 * params.psi_j * ks * dth) / (2.0 * ks * i)
                    + (s2 - 2.0 * ks * dth * (params.psi0 + 2.0 * params.psi_j))
                    / (2.0 * ks * ks) * np.log1p(ks / (i - ks)))

        lo = ks * (1.0 + 1e-12)
        hi = 2.0 * ks
        grow = t_of(hi) > t0
        while np.any(grow):
            hi = np.where(grow, hi * 2.0, hi)
            grow = t_of(hi) > t0
        for _ in range(90):
            mid = 0.5 * (lo + hi)
            high = t_of(mid) > t0
            lo = np.where(high, mid, lo)
            hi = np.where(high, hi, mid)
        return 0.5 * (lo + hi)
    raise InvalidInputError(f"unknown infiltration model {kind!r}")


def integrate_infiltration(kind: str, params: SoilParams, i0: float, t0: float,
                           dt: float, t_end: float) -> list[InfiltrationState]:
    """RK4 time series of the chosen model's rate on a uniform grid.

    The rate stays strictly decreasing and above the saturated conductivity;
    any step that would violate this is subdivided.
    """
    if i0 <= params.ks:
        raise InvalidInputError("initial rate must exceed the saturated conductivity")
    if t0 <= 0.0 or dt <= 0.0 or t_end <= t0:
        raise InvalidInputError("need t0 > 0, dt > 0 and t_end > t0")
    psi_f = wetting_front_head(params) if kind == "green_ampt" else None
    n = int(np.floor((t_end - t0) / dt + 1e-9))
    out = [_make_state(kind, params, i0, t0, psi_f)]
    i = np.array([i0])
    for k in range(1, n + 1):
        t = t0 + k * dt
        i = advance_rate_batch(kind, i, dt, params, dt=dt, t_start=t - dt)
        out.append(_make_state(kind, params, float(i[0]), t, psi_f))
    return out


def _make_state(kind: str, params: SoilParams, i: float, t: float,
                psi_f: float | None) -> InfiltrationState:
    if kind == "green_ampt" and i > params.ks:
        x_f = params.ks * (params.psi0 - psi_f) / (i - params.ks)
    else:
        x_f = float("nan")
    return InfiltrationState(i=i, t=t, x_f=x_f)
