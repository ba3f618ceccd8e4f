import numpy as np
import pytest
from numpy.testing import assert_allclose

from mmda.bma import bma_combine, run_bma
from mmda.core import GaussianBelief, InvalidInputError, NoiseSchedule, Observation
from mmda.kalman import AssimilationProblem, LinearModel, assimilate_step, run_mm_kf


def scalar_belief(mean, var):
    return GaussianBelief([mean], [[var]])


class TestBmaCombine:
    def test_single_model_is_identity(self):
        b = scalar_belief(1.5, 0.7)
        combo = bma_combine([b])
        assert_allclose(combo.combined.mean, b.mean)
        assert_allclose(combo.combined.cov, b.cov, atol=1e-14)
        assert_allclose(combo.weights, [1.0])

    def test_symmetric_pair(self):
        combo = bma_combine([scalar_belief(0.0, 1.0), scalar_belief(2.0, 1.0)])
        assert combo.combined.mean[0] == pytest.approx(1.0)
        assert combo.combined.cov[0, 0] == pytest.approx(0.5)
        assert_allclose(combo.weights, [0.5, 0.5])

    def test_precision_weighted_oracle_and_fusion_equivalence(self):
        beliefs = [scalar_belief(1.0, 1.0), scalar_belief(2.0, 0.5), scalar_belief(3.0, 0.25)]
        combo = bma_combine(beliefs)
        assert combo.combined.mean[0] == pytest.approx(17.0 / 7.0, abs=1e-12)
        assert combo.combined.cov[0, 0] == pytest.approx(1.0 / 7.0, abs=1e-12)
        fused = assimilate_step(beliefs, None).analyzed
        assert combo.combined.mean[0] == pytest.approx(fused.mean[0], abs=1e-10)
        assert combo.combined.cov[0, 0] == pytest.approx(fused.cov[0, 0], abs=1e-10)

    def test_weights_invariant_under_common_rescaling(self):
        beliefs = [scalar_belief(0.0, 0.4), scalar_belief(1.0, 1.6), scalar_belief(2.0, 0.8)]
        scaled = [GaussianBelief(b.mean, 7.3 * b.cov) for b in beliefs]
        assert_allclose(bma_combine(scaled).weights, bma_combine(beliefs).weights,
                        atol=1e-12)

    def test_weight_simplex(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            n = int(rng.integers(1, 4))
            beliefs = []
            for _ in range(int(rng.integers(1, 5))):
                a = rng.normal(size=(n, n))
                beliefs.append(GaussianBelief(rng.normal(size=n), a @ a.T + 0.2 * np.eye(n)))
            combo = bma_combine(beliefs)
            assert np.all(combo.weights >= -1e-12)
            assert float(np.sum(combo.weights)) == pytest.approx(1.0, abs=1e-12)

    def test_matches_data_free_fusion_in_higher_dimension(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            beliefs = []
            for _ in range(3):
                a = rng.normal(size=(2, 2))
                beliefs.append(GaussianBelief(rng.normal(size=2), a @ a.T + 0.2 * np.eye(2)))
            combo = bma_combine(beliefs)
            fused = assimilate_step(beliefs, None).analyzed
            assert_allclose(combo.combined.mean, fused.mean, atol=1e-10)
            assert_allclose(combo.combined.cov, fused.cov, atol=1e-10)

    def test_empty_rejected(self):
        with pytest.raises(InvalidInputError):
            bma_combine([])


def two_model_problem(obs_noise_var, n_steps=20, seed=0):
    rng = np.random.default_rng(seed)
    obs = {k: Observation(k, rng.normal(size=1) + 1.0, [[obs_noise_var]])
           for k in range(1, n_steps + 1)}
    models = (LinearModel([[0.9]], NoiseSchedule.constant([[0.4]])),
              LinearModel([[0.85]], NoiseSchedule.constant([[0.2]])))
    return AssimilationProblem(("a", "b"), models,
                               GaussianBelief([0.5], [[1.0]]), obs, n_steps)


class TestRunBma:
    def test_identical_across_data_noise_settings(self):
        t1 = run_bma(two_model_problem(0.002**2))
        t2 = run_bma(two_model_problem(0.01**2))
        assert np.array_equal(t1.analyzed_means(), t2.analyzed_means())
        assert np.array_equal(t1.analyzed_covs(), t2.analyzed_covs())

    def test_single_model_is_pure_forecast(self):
        model = LinearModel([[0.8]], NoiseSchedule.constant([[0.1]]))
        prob = AssimilationProblem(("m",), (model,),
                                   GaussianBelief([2.0], [[0.3]]), {}, 6)
        trace = run_bma(prob)
        assert_allclose(trace.analyzed_means()[:, 0], 2.0 * 0.8 ** np.arange(7),
                        atol=1e-12)

    def test_equals_data_free_multi_model_filter(self):
        prob = two_model_problem(0.002**2)
        data_free = AssimilationProblem(prob.model_ids, prob.models, prob.init,
                                        {}, prob.n_steps)
        t_bma = run_bma(prob)
        t_kf = run_mm_kf(data_free)
        assert np.max(np.abs(t_bma.analyzed_means() - t_kf.analyzed_means())) < 1e-10
        assert np.max(np.abs(t_bma.analyzed_covs() - t_kf.analyzed_covs())) < 1e-10

    def test_per_step_equivalence_invariant(self):
        rng = np.random.default_rng(5)
        for _ in range(15):
            beliefs = [scalar_belief(float(rng.normal()), float(rng.uniform(0.1, 2.0)))
                       for _ in range(int(rng.integers(1, 5)))]
            combo = bma_combine(beliefs)
            fused = assimilate_step(beliefs, None).analyzed
            assert combo.combined.mean[0] == pytest.approx(fused.mean[0], abs=1e-10)
            assert combo.combined.cov[0, 0] == pytest.approx(fused.cov[0, 0], abs=1e-10)
