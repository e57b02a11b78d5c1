"""
Unit tests for FA/MoFA models: projection through a retina, exact
posteriors, reconstruction, mixture responsibilities and x-space fitting.
"""

import numpy as np
import pytest
from scipy.linalg import subspace_angles

from conftest import (
    SMALL_OFFSETS,
    SMALL_SHAPE,
    SMALL_SPEC,
    condition_gaussian,
    dense_logpdf,
    joint_latent_glimpse,
    random_fa,
    random_projection,
)
from glimpse.exceptions import ContractViolation, DegenerateNoiseError
from glimpse.models import (
    FAModel,
    GlimpseModel,
    MixturePosterior,
    MoFAModel,
    Posterior,
    ProjectedFA,
    component_entropy,
    components_for_variance,
    fa_loglik,
    fit_fa_em,
    fit_mofa_x,
    fit_ppca,
    fuse_evidence,
    fused_responsibilities,
    marginal_loglik,
    mixture_reconstruct,
    posterior,
    project,
    psi_y_init,
    reconstruct,
    responsibilities,
)
from glimpse.retina import Offset, RetinaSpec, build_layout, place


@pytest.fixture
def small_rt(small_placements):
    return small_placements[0]


class TestModelTypes:
    """construction contracts"""

    def test_fa_dimensions(self, rng):
        """Test D and K come from W"""
        fa = random_fa(rng, 6, 2)
        assert (fa.D, fa.K) == (6, 2)
        np.testing.assert_allclose(fa.marginal_variance(), np.sum(fa.W ** 2, axis=1) + fa.psi)

    def test_fa_rejects_bad_noise(self):
        """Test a zero noise variance is degenerate"""
        with pytest.raises(DegenerateNoiseError):
            FAModel(np.zeros(2), np.ones((2, 1)), np.array([1.0, 0.0]))

    def test_fa_rejects_wide_loadings(self):
        """Test K may not exceed D"""
        with pytest.raises(ContractViolation, match="exceeds"):
            FAModel(np.zeros(2), np.ones((2, 3)), np.ones(2))

    def test_mixture_weights_must_sum_to_one(self, rng):
        """Test mixing proportions are validated"""
        fa = random_fa(rng, 4, 1)
        with pytest.raises(ContractViolation, match="sum to 1"):
            MoFAModel((fa, fa), np.array([0.5, 0.6]))

    def test_projection_noise_length(self):
        """Test psi must match the number of active cells"""
        with pytest.raises(ContractViolation, match="active cells"):
            ProjectedFA(3, np.zeros(2), np.ones((2, 1)), np.ones(3))


class TestProject:
    """mapping an x-space model through V"""

    def test_matches_dense_operator(self, rng, small_rt):
        """Test W_a = V W and mu_a = V mu against the dense matrix"""
        fa = random_fa(rng, 16, 3)
        pfa = project(fa, small_rt, np.ones(small_rt.n_active))
        np.testing.assert_allclose(pfa.W, small_rt.dense @ fa.W, rtol=1e-12)
        np.testing.assert_allclose(pfa.mu, small_rt.dense @ fa.mu, rtol=1e-12)
        assert pfa.layout is small_rt.layout

    def test_constant_column_stays_constant(self, rng, small_rt):
        """Test averaging preserves a constant loading column"""
        W = np.hstack([np.full((16, 1), 0.7), rng.normal(size=(16, 1))])
        pfa = project(FAModel(np.zeros(16), W, np.ones(16)), small_rt, np.ones(small_rt.n_active))
        np.testing.assert_allclose(pfa.W[:, 0], 0.7)

    def test_uniform_full_coverage_is_restriction(self, rng):
        """Test a 1x1 layout covering the image leaves the model unchanged"""
        rt = place(build_layout(RetinaSpec(grid_side=4, rings=(), center_cell=1)), 4, 4, Offset(0, 0))
        fa = random_fa(rng, 16, 2)
        pfa = project(fa, rt, fa.psi)
        np.testing.assert_allclose(pfa.W, fa.W)
        np.testing.assert_allclose(pfa.mu, fa.mu)

    def test_psi_length_checked(self, rng, small_rt):
        """Test psi_y must have one entry per active cell"""
        with pytest.raises(ContractViolation, match="active cells"):
            project(random_fa(rng, 16, 2), small_rt, np.ones(3))

    def test_psi_y_init_for_2x2_cells(self, small_rt):
        """Test a constant psi_x over 2x2 cells gives psi/4 on coarse cells and psi on fine ones"""
        init = psi_y_init(small_rt, np.full(16, 2.0))
        np.testing.assert_allclose(np.sort(init), [0.5] * 3 + [2.0] * 4)

    def test_psi_y_init_cases(self):
        """Test sigma^2 on 1x1 cells, sigma^2/16 on a 4x4 cell and 0.625 for a mixed 2x2 cell"""
        uniform = place(build_layout(RetinaSpec(grid_side=2, rings=(), center_cell=1)), 2, 2, Offset(0, 0))
        np.testing.assert_allclose(psi_y_init(uniform, np.full(4, 0.3)), 0.3)
        coarse = place(build_layout(RetinaSpec(grid_side=4, rings=(), center_cell=4)), 4, 4, Offset(0, 0))
        np.testing.assert_allclose(psi_y_init(coarse, np.full(16, 0.32)), [0.02])
        pair = place(build_layout(RetinaSpec(grid_side=2, rings=(), center_cell=2)), 2, 2, Offset(0, 0))
        np.testing.assert_allclose(psi_y_init(pair, np.array([1.0, 2.0, 3.0, 4.0])), [0.625])


class TestPosterior:
    """exact latent posteriors for a single glimpse"""

    def test_centered_glimpse(self, rng):
        """Test y = mu gives a zero posterior mean"""
        pfa = random_projection(rng, 5, 2)
        np.testing.assert_allclose(posterior(pfa, pfa.mu).mean, 0.0, atol=1e-14)

    def test_uninformative_glimpse(self):
        """Test W = 0 leaves the prior untouched"""
        pfa = ProjectedFA(0, np.zeros(3), np.zeros((3, 2)), np.ones(3))
        post = posterior(pfa, np.ones(3))
        np.testing.assert_allclose(post.mean, 0.0)
        np.testing.assert_allclose(post.cov, np.eye(2))

    def test_matches_dense_conditioning(self, rng):
        """Test agreement with conditioning the joint Gaussian over (z, y)"""
        for _ in range(100):
            pfa = random_projection(rng, int(rng.integers(1, 6)), int(rng.integers(1, 4)))
            y = rng.normal(size=pfa.dim)
            mean, cov = condition_gaussian(*joint_latent_glimpse(pfa), np.arange(pfa.K, pfa.K + pfa.dim), y)
            post = posterior(pfa, y)
            np.testing.assert_allclose(post.mean, mean, atol=1e-8)
            np.testing.assert_allclose(post.cov, cov, atol=1e-8)

    def test_never_increases_entropy(self, rng):
        """Test the posterior entropy is at most the prior entropy"""
        pfa = random_projection(rng, 4, 3)
        assert posterior(pfa, rng.normal(size=4)).entropy() <= Posterior.prior(3).entropy() + 1e-12

    def test_glimpse_length_checked(self, rng):
        """Test a glimpse of the wrong length is refused"""
        with pytest.raises(ContractViolation, match="does not match"):
            posterior(random_projection(rng, 4, 2), np.zeros(5))


class TestReconstruct:
    """x-space predictions"""

    def test_prior_reconstruction(self, rng):
        """Test the prior gives the mean image and the marginal variance"""
        fa = random_fa(rng, 8, 3)
        x_hat, var = reconstruct(fa, Posterior.prior(3))
        np.testing.assert_allclose(x_hat, fa.mu)
        np.testing.assert_allclose(var, fa.marginal_variance())

    def test_planted_latent_recovered(self, rng, small_rt):
        """Test nearly noiseless glimpses recover a planted latent"""
        fa = random_fa(rng, 16, 2)
        z = rng.normal(size=2)
        pfa = project(fa, small_rt, np.full(small_rt.n_active, 1e-8))
        y = small_rt.matrix @ (fa.mu + fa.W @ z)
        x_hat, _ = reconstruct(fa, posterior(pfa, y))
        assert np.max(np.abs(x_hat - (fa.mu + fa.W @ z))) < 1e-3

    def test_latent_dimension_checked(self, rng):
        """Test a posterior of the wrong size is refused"""
        with pytest.raises(ContractViolation, match="K="):
            reconstruct(random_fa(rng, 8, 3), Posterior.prior(2))


class TestLikelihoodAndMixtures:
    """marginal densities and responsibilities"""

    def test_scalar_loglik(self):
        """Test W = 0, psi = 1 at the mean gives the standard normal log density"""
        pfa = ProjectedFA(0, np.zeros(1), np.zeros((1, 1)), np.ones(1))
        assert marginal_loglik(pfa, np.zeros(1)) == pytest.approx(-0.9189385, abs=1e-6)

    def test_loglik_matches_dense(self, rng):
        """Test the low-rank density against the densely formed covariance"""
        pfa = random_projection(rng, 6, 2)
        y = rng.normal(size=6)
        dense = dense_logpdf(y, pfa.mu, pfa.W @ pfa.W.T + np.diag(pfa.psi))
        assert marginal_loglik(pfa, y) == pytest.approx(dense, rel=1e-10)

    def test_single_component(self, rng):
        """Test M = 1 puts all responsibility on the only component"""
        pfa = random_projection(rng, 3, 1)
        mp = responsibilities([pfa], np.ones(1), rng.normal(size=3))
        np.testing.assert_allclose(mp.responsibilities, [1.0])
        assert mp.entropy_bits() == 0.0

    def test_identical_components(self, rng):
        """Test two identical components share the responsibility equally"""
        pfa = random_projection(rng, 3, 1)
        mp = responsibilities([pfa, pfa], np.array([0.5, 0.5]), rng.normal(size=3))
        np.testing.assert_allclose(mp.responsibilities, [0.5, 0.5])

    def test_separated_components(self):
        """Test a glimpse at one component's mean is claimed by it"""
        near = ProjectedFA(0, np.zeros(1), np.zeros((1, 1)), np.full(1, 0.1))
        far = ProjectedFA(0, np.full(1, 10.0), np.zeros((1, 1)), np.full(1, 0.1))
        mp = responsibilities([near, far], np.array([0.5, 0.5]), np.zeros(1))
        assert mp.responsibilities[0] > 0.99

    def test_component_entropy(self):
        """Test the documented entropies in bits"""
        assert component_entropy([0.99, 0.01]) == pytest.approx(0.0808, abs=1e-4)
        assert component_entropy([0.0, 1.0, 0.0]) == 0.0
        assert component_entropy(np.full(10, 0.1)) == pytest.approx(np.log2(10), rel=1e-12)

    def test_fused_evidence_matches_stacked_density(self, rng):
        """Test the Woodbury evidence equals the dense stacked log density and posterior"""
        pfas = [random_projection(rng, d, 2, offset_id=j) for j, d in enumerate((3, 4, 2))]
        ys = [rng.normal(size=p.dim) for p in pfas]
        W = np.vstack([p.W for p in pfas])
        mu = np.concatenate([p.mu for p in pfas])
        psi = np.concatenate([p.psi for p in pfas])
        y = np.concatenate(ys)
        log_density, post = fuse_evidence(pfas, ys)
        assert log_density == pytest.approx(dense_logpdf(y, mu, W @ W.T + np.diag(psi)), rel=1e-10)
        stacked = ProjectedFA("stack", mu, W, psi)
        np.testing.assert_allclose(post.mean, posterior(stacked, y).mean, atol=1e-10)
        np.testing.assert_allclose(post.cov, posterior(stacked, y).cov, atol=1e-10)

    def test_fused_responsibilities_single_glimpse(self, rng):
        """Test fused responsibilities reduce to the single-glimpse ones"""
        pfas = [random_projection(rng, 3, 2) for _ in range(3)]
        pi = np.array([0.2, 0.3, 0.5])
        y = rng.normal(size=3)
        fused = fused_responsibilities([[p] for p in pfas], pi, [y])
        single = responsibilities(pfas, pi, y)
        np.testing.assert_allclose(fused.responsibilities, single.responsibilities, rtol=1e-10)

    def test_mixture_reconstruct(self, rng):
        """Test M = 1 matches reconstruct and a one-hot posterior picks its component"""
        fa_a, fa_b = random_fa(rng, 5, 2), random_fa(rng, 5, 2)
        post = Posterior(rng.normal(size=2), np.eye(2) * 0.5)
        x_single, var_single = mixture_reconstruct(MoFAModel.single(fa_a), MixturePosterior(np.ones(1), (post,)))
        np.testing.assert_allclose(x_single, reconstruct(fa_a, post)[0])
        np.testing.assert_allclose(var_single, reconstruct(fa_a, post)[1])
        mixture = MoFAModel((fa_a, fa_b), np.array([0.5, 0.5]))
        x_hot, _ = mixture_reconstruct(mixture, MixturePosterior(np.array([0.0, 1.0]), (post, post)))
        np.testing.assert_allclose(x_hot, reconstruct(fa_b, post)[0])


class TestFitting:
    """x-space PPCA, FA and MoFA fits"""

    def test_ppca_noiseless_subspace(self, rng):
        """Test data on an affine subspace is recovered with vanishing noise"""
        basis = rng.normal(size=(2, 10))
        X = 3.0 + rng.normal(size=(200, 2)) @ basis
        fa = fit_ppca(X, 2)
        assert np.max(subspace_angles(fa.W, basis.T)) < 1e-6
        assert fa.psi[0] < 1e-8
        np.testing.assert_allclose(fa.mu, X.mean(axis=0))

    def test_ppca_isotropic_data(self):
        """Test isotropic data puts nearly all variance in the noise"""
        X = np.random.default_rng(5).normal(size=(200_000, 5))
        fa = fit_ppca(X, 1)
        assert np.linalg.norm(fa.W) < 0.2
        assert fa.psi[0] == pytest.approx(1.0, abs=0.02)

    def test_ppca_rank_guard(self, rng):
        """Test K must leave discarded eigenvalues"""
        with pytest.raises(ContractViolation, match="no discarded"):
            fit_ppca(rng.normal(size=(50, 4)), 4)

    def test_components_for_variance(self):
        """Test the count of components reaching a variance fraction"""
        X = np.random.default_rng(2).normal(size=(20_000, 4)) * np.sqrt([10.0, 1.0, 0.5, 0.1])
        assert components_for_variance(X, 0.8) == 1
        assert components_for_variance(X, 0.9) == 2
        assert components_for_variance(X, 0.97) == 3

    def test_em_monotone_and_beats_ppca(self, rng):
        """Test the EM trace never decreases and FA fits at least as well as PPCA"""
        truth = FAModel(np.zeros(6), rng.normal(size=(6, 2)), rng.uniform(0.1, 2.0, size=6))
        X = rng.normal(size=(2000, 2)) @ truth.W.T + rng.normal(size=(2000, 6)) * np.sqrt(truth.psi)
        result = fit_fa_em(X, 2, iters=500, tol=1e-10)
        trace = np.array(result.loglik_trace)
        assert np.all(np.diff(trace) >= -1e-9 * np.abs(trace[1:]))
        assert fa_loglik(result.model, X) >= fa_loglik(fit_ppca(X, 2), X) - 1e-6
        assert np.all(result.model.psi > 0)
        assert fa_loglik(result.model, X) == pytest.approx(trace.max(), rel=1e-9)

    def test_em_stationary_point(self, rng):
        """Test restarting EM from its own fixed point barely moves the parameters"""
        X = rng.normal(size=(1000, 2)) @ rng.normal(size=(2, 5)) + rng.normal(size=(1000, 5)) * 0.5
        first = fit_fa_em(X, 2, iters=2000, tol=1e-12).model
        second = fit_fa_em(X, 2, iters=50, init=first).model
        np.testing.assert_allclose(second.W @ second.W.T, first.W @ first.W.T, atol=1e-3)
        np.testing.assert_allclose(second.psi, first.psi, atol=1e-3)

    def test_mofa_single_component_is_ppca(self, rng):
        """Test M = 1 reduces to PPCA"""
        X = rng.normal(size=(100, 6))
        mofa = fit_mofa_x(X, 2, 1)
        ppca = fit_ppca(X, 2)
        np.testing.assert_allclose(mofa.components[0].W @ mofa.components[0].W.T, ppca.W @ ppca.W.T)
        np.testing.assert_allclose(mofa.pi, [1.0])

    def test_mofa_two_blobs(self, rng):
        """Test two separated blobs yield two half-weight components at the blob means"""
        X = np.vstack([rng.normal(size=(400, 4)) - 5.0, rng.normal(size=(400, 4)) + 5.0])
        mofa = fit_mofa_x(X, 1, 2, seed=0)
        np.testing.assert_allclose(mofa.pi, [0.5, 0.5])
        means = sorted((fa.mu for fa in mofa.components), key=lambda mu: mu[0])
        np.testing.assert_allclose(means[0], -5.0, atol=0.2)
        np.testing.assert_allclose(means[1], 5.0, atol=0.2)

    def test_mofa_needs_enough_data(self, rng):
        """Test N must exceed M*K"""
        with pytest.raises(ContractViolation):
            fit_mofa_x(rng.normal(size=(10, 6)), 3, 4)


class TestGlimpseModel:
    """the model container used by design, learning and evaluation"""

    def test_from_x_model_seeds_noise(self, rng):
        """Test psi_y starts at diag(V Psi_x V^T) for every offset"""
        fa = random_fa(rng, 16, 2)
        model = GlimpseModel.from_x_model(fa, SMALL_SPEC, SMALL_SHAPE, SMALL_OFFSETS)
        assert model.n_components == 1 and not model.is_mixture
        for a, rt in enumerate(model.placements):
            np.testing.assert_allclose(model.psi_y[0][a], psi_y_init(rt, fa.psi))

    def test_shape_must_match(self, rng):
        """Test the image shape must agree with D"""
        with pytest.raises(ContractViolation):
            GlimpseModel.from_x_model(random_fa(rng, 12, 2), SMALL_SPEC, SMALL_SHAPE, SMALL_OFFSETS)

    def test_projection_is_cached(self, fa_model):
        """Test repeated lookups return the same projection"""
        assert fa_model.projection(0, 1) is fa_model.projection(0, 1)
        assert fa_model.projection(0, 1).offset_id == 1

    def test_infer_without_glimpses_is_prior(self, mofa_model):
        """Test zero glimpses leave pi and every prior posterior"""
        mp = mofa_model.infer([])
        np.testing.assert_allclose(mp.responsibilities, mofa_model.mixture.pi)
        for post in mp.posteriors:
            np.testing.assert_allclose(post.cov, np.eye(2))

    def test_infer_single_glimpse(self, mofa_model, rng):
        """Test one glimpse matches the per-component responsibilities"""
        x = rng.normal(size=16)
        y = mofa_model.glimpse(2, x)
        mp = mofa_model.infer([(2, y)])
        direct = responsibilities([mofa_model.projection(m, 2) for m in range(3)], mofa_model.mixture.pi, y)
        np.testing.assert_allclose(mp.responsibilities, direct.responsibilities, rtol=1e-10)

    def test_infer_full_image(self, fa_model, rng):
        """Test the full-image condition conditions on every pixel with psi_x"""
        x = rng.normal(size=16)
        fa = fa_model.mixture.components[0]
        expected = posterior(ProjectedFA("full", fa.mu, fa.W, fa.psi), x)
        np.testing.assert_allclose(fa_model.infer_full(x).posteriors[0].mean, expected.mean, rtol=1e-10)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
