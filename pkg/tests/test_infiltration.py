import csv
import importlib.resources
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from mmda.core import InvalidInputError
from mmda.infiltration import (
    BET_DAGAN,
    SingularityError,
    SoilParams,
    a_of_m,
    advance_rate_batch,
    green_ampt_implicit,
    green_ampt_rhs,
    initial_rate_batch,
    integrate_infiltration,
    parlange_initial_rate,
    parlange_rhs,
    parlange_time,
    sorptivity_sq,
    van_genuchten,
    wetting_front_head,
)

# High-precision oracle values (40-digit Gamma/quadrature evaluation), frozen.
A_AT_BET_DAGAN_M = 1.1986349302403469
A_AT_08 = 7.3328942739023034
PSI_F_BET_DAGAN = -7.0222818883637169
S2_BET_DAGAN = 0.10860717015568
VG_KR_AT_MINUS_100 = 2.9768133017914826e-4
VG_THETA_AT_MINUS_100 = 0.26811021692918287


class TestVanGenuchten:
    def test_saturation(self):
        kr, th = van_genuchten(0.0, BET_DAGAN.alpha, BET_DAGAN.n)
        assert kr == 1.0
        assert th == 1.0

    def test_dry_limit(self):
        kr, th = van_genuchten(-1e6, BET_DAGAN.alpha, BET_DAGAN.n)
        assert 0.0 <= kr < 1e-3
        assert 0.0 <= th < 1e-3

    def test_bet_dagan_regression(self):
        kr, th = van_genuchten(-100.0, BET_DAGAN.alpha, BET_DAGAN.n)
        assert kr == pytest.approx(VG_KR_AT_MINUS_100, rel=1e-12)
        assert th == pytest.approx(VG_THETA_AT_MINUS_100, rel=1e-12)

    def test_monotone_in_suction(self):
        psis = -np.logspace(-2, 4, 80)  # suction magnitude increases along the array
        kr, th = van_genuchten(psis, BET_DAGAN.alpha, BET_DAGAN.n)
        assert np.all(np.diff(kr) <= 1e-15)
        assert np.all(np.diff(th) <= 1e-15)
        assert np.all((kr >= 0) & (kr <= 1) & (th >= 0) & (th <= 1))

    def test_invalid_parameters(self):
        with pytest.raises(InvalidInputError):
            van_genuchten(-1.0, 0.0, 1.81)
        with pytest.raises(InvalidInputError):
            van_genuchten(-1.0, 0.05, 1.0)


class TestWettingFrontHead:
    def test_box_integrand(self):
        c = 3.7
        psi_f = wetting_front_head(BET_DAGAN, kr=lambda psi: 1.0 if -c <= psi <= 0.0 else 0.0)
        assert psi_f == pytest.approx(-c, abs=1e-6)

    def test_doubling_alpha_halves_magnitude(self):
        base = wetting_front_head(BET_DAGAN)
        doubled = wetting_front_head(BET_DAGAN.with_values(BET_DAGAN.ks, 2 * BET_DAGAN.alpha))
        assert doubled == pytest.approx(base / 2.0, rel=1e-6)

    def test_bet_dagan_regression(self):
        assert wetting_front_head(BET_DAGAN) == pytest.approx(PSI_F_BET_DAGAN, abs=1e-8)

    def test_negative_and_finite_for_nearby_soils(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            p = SoilParams(n=float(rng.uniform(1.3, 2.5)),
                           ks=float(np.exp(rng.normal(-3.58, 0.5))),
                           alpha=float(np.exp(rng.normal(-3.01, 0.5))))
            v = wetting_front_head(p)
            assert np.isfinite(v) and v < 0.0

    def test_fast_path_matches_quadrature(self):
        from mmda.infiltration import _psi_f_fast
        assert float(_psi_f_fast(BET_DAGAN.alpha, BET_DAGAN.n)) == pytest.approx(
            wetting_front_head(BET_DAGAN), abs=1e-8)


class TestAOfM:
    def test_bet_dagan_m_warns_and_matches_oracle(self):
        m = BET_DAGAN.m
        assert m == pytest.approx(1 - 1 / 1.81)
        with pytest.warns(RuntimeWarning):
            val = a_of_m(m)
        assert val == pytest.approx(A_AT_BET_DAGAN_M, rel=1e-12)

    def test_regular_regime_fixture(self):
        val = a_of_m(0.8)
        assert val == pytest.approx(A_AT_08, rel=1e-12)

    def test_continuity(self):
        assert abs(a_of_m(0.8) - a_of_m(0.8 + 1e-6)) < 1e-3

    @pytest.mark.parametrize("m", [2.0 / 3.0, 0.4, 2.0 / 3.0 + 5e-4, 0.4 - 5e-4])
    def test_pole_neighborhood_rejected(self, m):
        with pytest.raises(InvalidInputError):
            a_of_m(m)

    def test_gamma_pole_rejected(self):
        # 3m/2 - 1 = -1 at m = 0; m = 2/15 puts 5m/2 - 1 near... use the
        # argument 1.5m-1 hitting 0 exactly at m = 2/3 (already a pole) and
        # -1 at m would be negative; instead check m out of range.
        with pytest.raises(InvalidInputError):
            a_of_m(0.0)
        with pytest.raises(InvalidInputError):
            a_of_m(1.0)


class TestSorptivity:
    def test_large_n_limit(self):
        # (1 - m) -> 0 as n grows, but the Gamma expression has a simple pole
        # at m = 1, so the product (1 - m) A(m) tends to 2 (verified with
        # 30-digit arithmetic): S^2 -> 2 (Ks/alpha)(phi - theta_init).
        tight = SoilParams(n=1000.0)
        limit = 2.0 * (tight.ks / tight.alpha) * tight.moisture_deficit
        assert sorptivity_sq(tight) == pytest.approx(limit, rel=5e-3)

    def test_linear_in_ks(self):
        base = sorptivity_sq(BET_DAGAN)
        doubled = sorptivity_sq(BET_DAGAN.with_values(2 * BET_DAGAN.ks, BET_DAGAN.alpha))
        assert doubled == pytest.approx(2.0 * base, rel=1e-12)

    def test_bet_dagan_regression(self):
        assert sorptivity_sq(BET_DAGAN) == pytest.approx(S2_BET_DAGAN, rel=1e-10)


class TestGreenAmptImplicit:
    def test_early_time_singularity_ordering(self):
        i_values = [green_ampt_implicit(BET_DAGAN, t).i for t in (1e-6, 1e-3, 1.0)]
        assert i_values[0] > i_values[1] > i_values[2]

    def test_gravity_dominated_limit(self):
        # Far past the capillary regime the rate settles at Ks.
        psi_f = wetting_front_head(BET_DAGAN)
        t = 1.0
        while True:
            st = green_ampt_implicit(BET_DAGAN, t)
            if st.x_f > 100.0 * (abs(psi_f) + BET_DAGAN.psi0):
                break
            t *= 2.0
        assert st.i == pytest.approx(BET_DAGAN.ks, rel=0.01)

    def test_residual_of_implicit_relation(self):
        psi_f = wetting_front_head(BET_DAGAN)
        dpsi = BET_DAGAN.psi0 - psi_f
        for t in (0.1, 1.0, 10.0, 30.0):
            st = green_ampt_implicit(BET_DAGAN, t)
            lhs = st.x_f - dpsi * math.log1p(st.x_f / dpsi)
            rhs = BET_DAGAN.ks * t / BET_DAGAN.moisture_deficit
            assert abs(lhs - rhs) < 1e-9

    def test_nonpositive_time_rejected(self):
        with pytest.raises(InvalidInputError):
            green_ampt_implicit(BET_DAGAN, 0.0)


class TestRhsFunctions:
    def test_fixed_points(self):
        assert green_ampt_rhs(BET_DAGAN, BET_DAGAN.ks) == 0.0
        assert parlange_rhs(BET_DAGAN, BET_DAGAN.ks) == 0.0

    def test_signs(self):
        for i in (BET_DAGAN.ks * 1.001, 0.1, 1.0, 10.0):
            assert green_ampt_rhs(BET_DAGAN, i) < 0.0
            assert parlange_rhs(BET_DAGAN, i) < 0.0

    def test_below_saturation_rejected(self):
        with pytest.raises(InvalidInputError):
            green_ampt_rhs(BET_DAGAN, 0.9 * BET_DAGAN.ks)
        with pytest.raises(InvalidInputError):
            parlange_rhs(BET_DAGAN, 0.9 * BET_DAGAN.ks)

    def test_quadratic_vanishing_at_saturation(self):
        # RHS(Ks + eps)/eps^2 stays bounded as eps -> 0.
        ratios_ga, ratios_pa = [], []
        for eps in np.logspace(-8, -3, 6):
            i = BET_DAGAN.ks + eps
            ratios_ga.append(abs(green_ampt_rhs(BET_DAGAN, i)) / eps**2)
            ratios_pa.append(abs(parlange_rhs(BET_DAGAN, i)) / eps**2)
        assert max(ratios_ga) / min(ratios_ga) < 2.0
        assert max(ratios_pa) / min(ratios_pa) < 2.0

    def test_parlange_denominator_negative_above_ks(self):
        s2 = sorptivity_sq(BET_DAGAN)
        dth = BET_DAGAN.moisture_deficit
        for i in (BET_DAGAN.ks * 1.01, 0.5, 5.0):
            den = s2 * (BET_DAGAN.ks - i) - 2 * BET_DAGAN.ks * dth * (
                BET_DAGAN.psi0 * i + BET_DAGAN.psi_j * BET_DAGAN.ks)
            assert den < 0.0

    def test_singularity_reported(self):
        # A zero ponded head cannot make the denominator vanish for i > Ks,
        # so force it with an unphysical rate just below saturation where the
        # batch formulas change sign: construct directly.
        s2 = sorptivity_sq(BET_DAGAN)
        dth = BET_DAGAN.moisture_deficit
        # root of the denominator lies below Ks; scan to find it
        i_root = None
        for i in np.linspace(0.001, BET_DAGAN.ks, 50000):
            den = s2 * (BET_DAGAN.ks - i) - 2 * BET_DAGAN.ks * dth * (
                BET_DAGAN.psi0 * i + BET_DAGAN.psi_j * BET_DAGAN.ks)
            if abs(den) < 1e-8:
                i_root = i
                break
        if i_root is None:
            pytest.skip("no near-root below saturation for these parameters")
        with pytest.raises((SingularityError, InvalidInputError)):
            parlange_rhs(BET_DAGAN, i_root)


class TestTrajectoryConsistency:
    def test_green_ampt_ode_vs_implicit(self):
        st0 = green_ampt_implicit(BET_DAGAN, 0.1)
        series = integrate_infiltration("green_ampt", BET_DAGAN, st0.i, 0.1, 1e-3, 30.0)
        for s in series[:: len(series) // 40]:
            ref = green_ampt_implicit(BET_DAGAN, s.t)
            assert abs(s.i - ref.i) < 1e-4

    def test_parlange_residual_along_path(self):
        i0 = parlange_initial_rate(BET_DAGAN, 0.1)
        series = integrate_infiltration("parlange", BET_DAGAN, i0, 0.1, 1e-3, 30.0)
        for s in series[:: len(series) // 40]:
            t_implied = parlange_time(BET_DAGAN, s.i)
            assert abs(t_implied - s.t) / s.t < 1e-3

    def test_richardson_fourth_order(self):
        st0 = green_ampt_implicit(BET_DAGAN, 0.1)
        vals = []
        for dt in (1e-3, 5e-4):
            series = integrate_infiltration("green_ampt", BET_DAGAN, st0.i, 0.1, dt, 10.0)
            vals.append(series[-1].i)
        assert abs(vals[0] - vals[1]) < 1e-8

    def test_monotone_decreasing(self):
        i0 = parlange_initial_rate(BET_DAGAN, 0.1)
        series = integrate_infiltration("parlange", BET_DAGAN, i0, 0.1, 0.01, 30.0)
        rates = np.array([s.i for s in series])
        assert np.all(np.diff(rates) < 0.0)
        assert np.all(rates > BET_DAGAN.ks)

    def test_invalid_inputs(self):
        with pytest.raises(InvalidInputError):
            integrate_infiltration("green_ampt", BET_DAGAN, BET_DAGAN.ks / 2, 0.1, 0.01, 1.0)
        with pytest.raises(InvalidInputError):
            integrate_infiltration("green_ampt", BET_DAGAN, 0.5, -0.1, 0.01, 1.0)
        with pytest.raises(InvalidInputError):
            integrate_infiltration("typo", BET_DAGAN, 0.5, 0.1, 0.01, 1.0)


class TestBatchHelpers:
    def test_batch_matches_scalar_series(self):
        st0 = green_ampt_implicit(BET_DAGAN, 0.1)
        series = integrate_infiltration("green_ampt", BET_DAGAN, st0.i, 0.1, 0.01, 5.0)
        batch = np.array([st0.i, st0.i])
        out = advance_rate_batch("green_ampt", batch, 4.9, BET_DAGAN, dt=0.01)
        assert_allclose(out, series[-1].i, rtol=1e-12)

    def test_initial_rate_batch_matches_scalar(self):
        ga = initial_rate_batch("green_ampt", 0.1, BET_DAGAN)
        assert float(ga[0]) == pytest.approx(green_ampt_implicit(BET_DAGAN, 0.1).i, rel=1e-10)
        pa = initial_rate_batch("parlange", 0.1, BET_DAGAN)
        assert float(pa[0]) == pytest.approx(parlange_initial_rate(BET_DAGAN, 0.1), rel=1e-9)

    def test_heterogeneous_batch(self):
        rng = np.random.default_rng(0)
        ks = np.exp(rng.normal(-3.58, 0.3, size=8))
        alpha = np.exp(rng.normal(-3.01, 0.3, size=8))
        i0 = initial_rate_batch("parlange", 0.1, BET_DAGAN, ks=ks, alpha=alpha)
        out = advance_rate_batch("parlange", i0, 4.9, BET_DAGAN, ks=ks, alpha=alpha, dt=0.005)
        assert np.all(out > ks)
        assert np.all(out < i0)
        # spot-check one lane against the scalar path
        p3 = BET_DAGAN.with_values(ks[3], alpha[3])
        i0_3 = parlange_initial_rate(p3, 0.1)
        ref = advance_rate_batch("parlange", np.array([i0_3]), 4.9, p3, dt=0.005)
        assert out[3] == pytest.approx(float(ref[0]), rel=1e-9)


def load_truth_table():
    ref = importlib.resources.files("mmda") / "scenarios" / "truth_infil.csv"
    with ref.open() as f:
        rows = list(csv.DictReader(f))
    t = np.array([float(r["t_min"]) for r in rows])
    i = np.array([float(r["i_cm_per_min"]) for r in rows])
    return t, i


def test_under_then_over_estimation_vs_truth_table():
    # Both reduced models start below the reference truth and end above it.
    t, truth = load_truth_table()
    for kind in ("green_ampt", "parlange"):
        i = initial_rate_batch(kind, float(t[0]), BET_DAGAN)
        series = [float(i[0])]
        for k in range(1, len(t)):
            i = advance_rate_batch(kind, i, float(t[k] - t[k - 1]), BET_DAGAN, dt=0.01)
            series.append(float(i[0]))
        series = np.array(series)
        early = series[1:5] - truth[1:5]
        late = series[-4:] - truth[-4:]
        assert np.all(early < 0.0), kind
        assert np.all(late > 0.0), kind


def test_soil_params_validation():
    with pytest.raises(InvalidInputError):
        SoilParams(theta_i=0.5, theta_init=0.4)
    with pytest.raises(InvalidInputError):
        SoilParams(n=0.9)
    with pytest.raises(InvalidInputError):
        SoilParams(psi_j=0.0)
    p = SoilParams()
    assert p.m == pytest.approx(1 - 1 / 1.81)
    assert p.ks == pytest.approx(math.exp(-3.58))
    assert p.alpha == pytest.approx(math.exp(-3.01))
