"""
Shared fixtures and dense reference computations for the test suite.

The small retina used throughout is a 6x6 grid with one ring of 2x2 cells
around a 2x2 fovea of single pixels, placed on 4x4 images; each of the four
offsets below covers the whole image with 7 active cells.
"""

import numpy as np
import pytest

from glimpse.learning import GlimpseDataset, sample_glimpse_dataset
from glimpse.models import FAModel, GlimpseModel, MoFAModel, ProjectedFA
from glimpse.retina import Offset, RetinaPlacements, RetinaSpec

SMALL_SPEC = RetinaSpec(grid_side=6, rings=((2, 2),), center_cell=1)
SMALL_SHAPE = (4, 4)
SMALL_OFFSETS = (Offset(-2, -2), Offset(-2, 0), Offset(0, -2), Offset(0, 0))


def random_fa(rng, D, K, noise=(0.2, 1.0)) -> FAModel:
    return FAModel(rng.normal(size=D), rng.normal(size=(D, K)), rng.uniform(*noise, size=D))


def random_projection(rng, dim, K, offset_id=0) -> ProjectedFA:
    return ProjectedFA(offset_id, rng.normal(size=dim), rng.normal(size=(dim, K)), rng.uniform(0.2, 1.0, size=dim))


def random_glimpse_model(rng, M=1, K=2, offsets=SMALL_OFFSETS) -> GlimpseModel:
    D = SMALL_SHAPE[0] * SMALL_SHAPE[1]
    components = tuple(random_fa(rng, D, K) for _ in range(M))
    pi = rng.dirichlet(np.full(M, 5.0)) if M > 1 else np.ones(1)
    placements = RetinaPlacements(SMALL_SPEC, SMALL_SHAPE, offsets)
    psi_y = tuple(tuple(rng.uniform(0.2, 1.0, size=n) for n in placements.active_counts()) for _ in range(M))
    return GlimpseModel(MoFAModel(components, pi), SMALL_SPEC, SMALL_SHAPE, offsets, psi_y)


def random_dataset(rng, n=12, protocol="uniform", per_image=1) -> GlimpseDataset:
    images = rng.normal(size=(8, SMALL_SHAPE[0] * SMALL_SHAPE[1]))
    placements = RetinaPlacements(SMALL_SPEC, SMALL_SHAPE, SMALL_OFFSETS)
    return sample_glimpse_dataset(images, placements, n, rng, protocol, per_image)


def condition_gaussian(mean, cov, observed, values):
    """Mean and covariance of the unobserved coordinates of N(mean, cov) given the observed ones."""
    mean = np.asarray(mean, dtype=np.float64)
    observed = np.asarray(observed)
    hidden = np.setdiff1d(np.arange(mean.size), observed)
    S_ho = cov[np.ix_(hidden, observed)]
    S_oo = cov[np.ix_(observed, observed)]
    gain = np.linalg.solve(S_oo, S_ho.T).T
    post_mean = mean[hidden] + gain @ (np.asarray(values) - mean[observed])
    post_cov = cov[np.ix_(hidden, hidden)] - gain @ S_ho.T
    return post_mean, post_cov


def joint_latent_glimpse(pfa: ProjectedFA):
    """Mean and covariance of (z, y) for z ~ N(0, I) and y = mu + W z + noise."""
    K = pfa.K
    mean = np.concatenate([np.zeros(K), pfa.mu])
    cov = np.block([[np.eye(K), pfa.W.T], [pfa.W, pfa.W @ pfa.W.T + np.diag(pfa.psi)]])
    return mean, cov


def dense_logpdf(y, mean, cov) -> float:
    r = np.asarray(y) - mean
    sign, logdet = np.linalg.slogdet(cov)
    assert sign > 0
    return float(-0.5 * r @ np.linalg.solve(cov, r) - 0.5 * logdet - 0.5 * r.size * np.log(2 * np.pi))


def central_difference(f, x, eps=1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = eps
        grad[i] = (f(x + step) - f(x - step)) / (2 * eps)
    return grad


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_placements():
    return RetinaPlacements(SMALL_SPEC, SMALL_SHAPE, SMALL_OFFSETS)


@pytest.fixture
def fa_model(rng):
    return random_glimpse_model(rng, M=1, K=2)


@pytest.fixture
def mofa_model(rng):
    return random_glimpse_model(rng, M=3, K=2)
