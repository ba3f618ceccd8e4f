import numpy as np
import pytest
from numpy.testing import assert_allclose

from mmda.core import (
    GaussianBelief,
    InvalidInputError,
    NoiseSchedule,
    Observation,
    keyed_rng,
)
from mmda.enkf import (
    Ensemble,
    assimilate_ensembles,
    enkf_forecast,
    enkf_init,
    ensemble_stats,
    run_mm_enkf,
)
from mmda.kalman import (
    AssimilationProblem,
    DifferentiableModel,
    LinearModel,
    assimilate_step,
    ekf_forecast,
    run_mm_kf,
)
from mmda.oscillator import exact_solution, make_oscillator_models, OscillatorParams, simulate_path


class TestEnkfInit:
    def test_zero_covariance_collapses_to_mean(self):
        b = GaussianBelief([3.0, -1.0], np.zeros((2, 2)))
        e = enkf_init(b, 5, seed=1)
        assert_allclose(e.members, np.tile([3.0, -1.0], (5, 1)))

    def test_sample_covariance_near_truth(self):
        b = GaussianBelief([0.0, 0.0], np.diag([1.0, 4.0]))
        e = enkf_init(b, 10_000, seed=2)
        s = ensemble_stats(e)
        assert abs(s.cov[0, 0] - 1.0) < 0.1
        assert abs(s.cov[1, 1] - 4.0) < 0.1

    def test_seed_repeatability(self):
        b = GaussianBelief([0.0], [[1.0]])
        a = enkf_init(b, 64, seed=7)
        c = enkf_init(b, 64, seed=7)
        assert np.array_equal(a.members, c.members)

    def test_too_small_rejected(self):
        with pytest.raises(InvalidInputError):
            enkf_init(GaussianBelief([0.0], [[1.0]]), 1, seed=0)


class TestEnkfForecast:
    def test_identity_no_noise(self):
        e = Ensemble(np.array([[1.0], [2.0]]))
        m = LinearModel([[1.0]], NoiseSchedule.constant([[0.0]]))
        out = enkf_forecast(m, e, 1, seed=0)
        assert_allclose(out.members, e.members)

    def test_deterministic_shift(self):
        e = Ensemble(np.array([[1.0], [2.0], [3.0]]))
        m = DifferentiableModel(lambda x: x + 5.0, NoiseSchedule.constant([[0.0]]))
        out = enkf_forecast(m, e, 1, seed=0)
        assert_allclose(out.members, e.members + 5.0)

    def test_sample_covariance_matches_linearized_propagation(self):
        # Oscillator RK4 interval map with small spread: sample covariance of
        # the stochastic forecast approaches G W G' + Q.
        _, rk4 = make_oscillator_models(pollution_var=0.0)
        q = 0.1 * np.eye(2)
        model = LinearModel(rk4.model.matrix, NoiseSchedule.constant(q))
        w = 0.01 * np.eye(2)
        belief = GaussianBelief([1.0, 0.5], w)
        ens = enkf_init(belief, 10_000, seed=3)
        out = enkf_forecast(model, ens, 1, seed=4)
        expected = rk4.model.matrix @ w @ rk4.model.matrix.T + q
        assert np.max(np.abs(ensemble_stats(out).cov - expected)) < 0.05


class TestEnsembleStats:
    def test_two_member_oracle(self):
        s = ensemble_stats(Ensemble(np.array([[0.0], [2.0]])))
        assert s.mean[0] == 1.0
        assert s.cov[0, 0] == 2.0  # divisor N-1 = 1

    def test_identical_members(self):
        s = ensemble_stats(Ensemble(np.full((6, 2), 3.3)))
        assert_allclose(s.cov, np.zeros((2, 2)), atol=1e-15)

    def test_large_sample_identity(self):
        rng = np.random.default_rng(5)
        s = ensemble_stats(Ensemble(rng.standard_normal((100_000, 2))))
        assert np.max(np.abs(s.cov - np.eye(2))) < 0.02

    def test_permutation_invariant(self):
        rng = np.random.default_rng(6)
        m = rng.normal(size=(40, 3))
        a = ensemble_stats(Ensemble(m))
        b = ensemble_stats(Ensemble(m[rng.permutation(40)]))
        assert_allclose(a.mean, b.mean, atol=1e-14)
        assert_allclose(a.cov, b.cov, atol=1e-13)


class TestAssimilateEnsembles:
    def test_matches_per_member_chain_without_data(self):
        rng = np.random.default_rng(8)
        fc = [Ensemble(rng.normal(size=(50, 2)) + c) for c in (0.0, 1.0)]
        members, entry = assimilate_ensembles(fc, None, seed=0, step=1)
        covs = [ensemble_stats(e).cov for e in fc]
        for i in range(0, 50, 7):
            beliefs = [GaussianBelief(fc[j].members[i], covs[j]) for j in range(2)]
            ref = assimilate_step(beliefs, None)
            assert_allclose(members[i], ref.analyzed.mean, atol=1e-10)
        assert_allclose(entry.analyzed.cov, assimilate_step(
            [GaussianBelief(np.zeros(2), c) for c in covs], None).analyzed.cov,
            atol=1e-10)

    def test_matches_per_member_chain_with_perturbed_data(self):
        rng = np.random.default_rng(9)
        fc = [Ensemble(rng.normal(size=(30, 1)) + c) for c in (0.0, 2.0)]
        d = Observation(3, [0.5], [[0.25]])
        seed = 11
        members, _ = assimilate_ensembles(fc, d, seed=seed, step=3)
        # reproduce the perturbation draws the implementation makes
        prng = keyed_rng(seed, 2, 3)
        lam, v = np.linalg.eigh(np.array([[0.25]]))
        root = v * np.sqrt(np.clip(lam, 0, None))
        perturbed = d.value + prng.standard_normal((30, 1)) @ root.T
        covs = [ensemble_stats(e).cov for e in fc]
        for i in range(0, 30, 5):
            beliefs = [GaussianBelief(fc[j].members[i], covs[j]) for j in range(2)]
            ref = assimilate_step(beliefs, Observation(3, perturbed[i], d.noise))
            assert_allclose(members[i], ref.analyzed.mean, atol=1e-10)

    def test_spread_never_exceeds_widest_forecast(self):
        rng = np.random.default_rng(10)
        fc = [Ensemble(rng.normal(scale=s, size=(4000, 1))) for s in (1.0, 2.0)]
        d = Observation(1, [0.0], [[0.5]])
        members, _ = assimilate_ensembles(fc, d, seed=1, step=1)
        spread = np.std(members, ddof=1)
        widest = max(np.std(e.members, ddof=1) for e in fc)
        assert spread <= widest * 1.05

    def test_mismatched_sizes_rejected(self):
        with pytest.raises(InvalidInputError):
            assimilate_ensembles([Ensemble(np.zeros((3, 1)) + 1),
                                  Ensemble(np.zeros((4, 1)))], None, seed=0, step=0)


def scalar_problem(n_steps=15, seed=0):
    rng = np.random.default_rng(seed)
    obs = {k: Observation(k, rng.normal(size=1) + 1.0, [[0.5]])
           for k in range(1, n_steps + 1)}
    models = (LinearModel([[0.9]], NoiseSchedule.constant([[0.4]])),
              LinearModel([[0.8]], NoiseSchedule.constant([[0.3]])))
    return AssimilationProblem(("a", "b"), models,
                               GaussianBelief([0.5], [[1.0]]), obs, n_steps)


class TestRunMmEnkf:
    def test_degenerate_ensembles_match_exact_filter(self):
        # Zero noise everywhere: every member equals the mean, so the
        # ensemble filter collapses onto the exact one.
        models = (LinearModel([[0.9]], NoiseSchedule.constant([[0.0]])),
                  LinearModel([[0.8]], NoiseSchedule.constant([[0.0]])))
        obs = {k: Observation(k, [1.0], [[0.0]]) for k in (1, 2, 3)}
        prob = AssimilationProblem(("a", "b"), models,
                                   GaussianBelief([0.5], [[0.0]]), obs, 3)
        t_kf = run_mm_kf(prob)
        t_en, _ = run_mm_enkf(prob, n=2, seed=0)
        assert_allclose(t_en.analyzed_means(), t_kf.analyzed_means(), atol=1e-12)

    def test_close_to_exact_kf_at_large_ensemble(self):
        prob = scalar_problem()
        kf_m = run_mm_kf(prob).analyzed_means()[1:, 0]
        t_en, _ = run_mm_enkf(prob, n=10_000, seed=1)
        en_m = t_en.analyzed_means()[1:, 0]
        rel = np.linalg.norm(en_m - kf_m) / np.linalg.norm(kf_m)
        assert rel < 0.05

    def test_error_decreases_with_ensemble_size(self):
        prob = scalar_problem()
        kf_m = run_mm_kf(prob).analyzed_means()[1:, 0]
        medians = []
        for n in (100, 1000, 10_000):
            errs = []
            for seed in range(6):
                en_m = run_mm_enkf(prob, n=n, seed=seed)[0].analyzed_means()[1:, 0]
                errs.append(np.linalg.norm(en_m - kf_m) / np.linalg.norm(kf_m))
            medians.append(np.median(errs))
        assert medians[0] > medians[1] > medians[2]

    def test_beats_single_models_on_oscillator(self):
        cn, rk4 = make_oscillator_models()
        p = OscillatorParams()
        truth = np.array([exact_solution(p, 0.6 * k) for k in range(26)])
        rng = np.random.default_rng(14)
        obs = {k: Observation(k, truth[k] + rng.normal(0, 0.1, 2), 0.01 * np.eye(2))
               for k in range(1, 26)}
        prob = AssimilationProblem(("cn", "rk4"), (cn.model, rk4.model),
                                   GaussianBelief(truth[0], 0.01 * np.eye(2)), obs, 25)
        t_en, _ = run_mm_enkf(prob, n=1000, seed=3)
        enkf_rmse = np.sqrt(np.mean((t_en.analyzed_means()[1:] - truth[1:]) ** 2))
        single = min(
            np.sqrt(np.mean((simulate_path(om, truth[0], 25, seed=3, stream=j)[1:]
                             - truth[1:]) ** 2))
            for j, om in enumerate((cn, rk4)))
        assert enkf_rmse < single

    def test_requires_ensemble_size(self):
        with pytest.raises(InvalidInputError):
            run_mm_enkf(scalar_problem(), n=1, seed=0)
