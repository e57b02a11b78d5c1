"""
Integration tests for the glimpse pipeline on data drawn from known models:
fit, design search, reconstruction protocol and learning from glimpses.
"""

import numpy as np
import pytest
from scipy.linalg import subspace_angles

from conftest import SMALL_OFFSETS, SMALL_SHAPE, SMALL_SPEC, random_fa
from glimpse.config import OptimizerConfig
from glimpse.design import search_exhaustive, search_greedy
from glimpse.evaluation import BED, FULL, RANDOM, run_protocol
from glimpse.learning import (
    LearnState,
    independent_baseline_loglik,
    init_from_glimpses,
    loglik,
    optimize,
    sample_glimpse_dataset,
)
from glimpse.models import GlimpseModel, MoFAModel, fit_fa_em
from glimpse.retina import Offset, RetinaPlacements, RetinaSpec


@pytest.fixture(autouse=True)
def single_thread(monkeypatch):
    monkeypatch.setenv("GLIMPSE_THREADS", "1")


def draw(fa, n, rng):
    return fa.mu + rng.normal(size=(n, fa.K)) @ fa.W.T + rng.normal(size=(n, fa.D)) * np.sqrt(fa.psi)


@pytest.fixture
def truth(rng):
    return random_fa(rng, SMALL_SHAPE[0] * SMALL_SHAPE[1], 2, noise=(0.05, 0.1))


@pytest.fixture
def fitted(truth, rng):
    train = draw(truth, 400, rng)
    fa = fit_fa_em(train, 2, iters=200).model
    return GlimpseModel.from_x_model(MoFAModel.single(fa), SMALL_SPEC, SMALL_SHAPE, SMALL_OFFSETS)


class TestDesignAndProtocol:
    """designs chosen from a fitted model and scored on held-out images"""

    def test_greedy_matches_exhaustive_for_one_fixation(self, fitted):
        """Test the first greedy pick is the exhaustive single-offset optimum"""
        assert search_greedy(fitted, J=1).design == search_exhaustive(fitted, J=1)[0].design

    def test_reconstruction_improves_with_fixations(self, fitted, truth, rng):
        """Test fixations and the full image reduce the mean error"""
        best = search_exhaustive(fitted, J=2)[0]
        report = run_protocol(fitted, best.design, draw(truth, 200, rng), seed=rng)
        assert report.rmse(BED, 2) < report.rmse(BED, 0)
        assert report.rmse(BED, FULL) < report.rmse(BED, 0)
        assert report.rmse(RANDOM, 0) == pytest.approx(report.rmse(BED, 0))
        assert sorted(report.sign_tests) == [1, 2]


class TestLearningFromGlimpses:
    """glimpse-space learning against its initialization and the baseline"""

    def test_likelihood_ordering(self, truth, rng):
        """Test the independent baseline, the initialization and the optimum are ordered"""
        placements = RetinaPlacements(SMALL_SPEC, SMALL_SHAPE, SMALL_OFFSETS)
        data = sample_glimpse_dataset(draw(truth, 300, rng), placements, 300, rng)
        state = init_from_glimpses(data, 2, iters=50)
        initial = loglik(state, data)
        learned, trace = optimize(state, data, OptimizerConfig(max_iter=100))
        final = loglik(learned, data)
        assert len(trace) > 1
        assert final > initial
        assert np.all(np.diff(trace["loglik"]) >= 0)
        assert final > independent_baseline_loglik(data)
        assert final == pytest.approx(trace["loglik"].iloc[-1])

    def test_round_trip_through_model(self, fitted, truth, rng):
        """Test a learned state becomes a usable glimpse model"""
        data = sample_glimpse_dataset(draw(truth, 60, rng), fitted.placements, 60, rng, "stratified")
        state, _ = optimize(LearnState.from_glimpse_model(fitted), data, OptimizerConfig(max_iter=10), fix_W=True)
        model = state.to_glimpse_model(fitted.retina, fitted.image_shape, fitted.offsets)
        np.testing.assert_array_equal(model.mixture.components[0].W, fitted.mixture.components[0].W)
        assert search_exhaustive(model, J=1)[0].eig_nats > 0

    @pytest.mark.slow
    def test_recovers_factor_subspace(self, rng):
        """Test learning from partial views recovers the loading subspace"""
        D, K = 100, 5
        truth = random_fa(rng, D, K, noise=(0.05, 0.1))
        truth = type(truth)(truth.mu, truth.W * 3.0, truth.psi)
        spec = RetinaSpec(grid_side=10, rings=(), center_cell=1)
        placements = RetinaPlacements(spec, (10, 10), (Offset(0, 0), Offset(0, -3), Offset(-3, 0)))
        data = sample_glimpse_dataset(draw(truth, 5000, rng), placements, 5000, rng)
        state = init_from_glimpses(data, K, iters=100)
        learned, trace = optimize(state, data, OptimizerConfig(max_iter=100))
        assert len(trace) > 1
        assert loglik(learned, data) > loglik(state, data)
        initial_angle = np.degrees(subspace_angles(state.W[0], truth.W).max())
        learned_angle = np.degrees(subspace_angles(learned.W[0], truth.W).max())
        assert learned_angle <= initial_angle + 0.5
        assert learned_angle < 5.0


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
