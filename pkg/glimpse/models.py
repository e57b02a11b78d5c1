"""
Factor-analysis and mixture-of-factor-analyzers models of the latent image
x, their per-offset projections into glimpse space, exact posterior
inference, reconstruction, and x-space fitting.
"""

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import entropy as _entropy
from sklearn.cluster import KMeans
from sklearn.decomposition import PCA

from .exceptions import ContractViolation, NumericalError
from .numerics import (
    LOG_2PI,
    LowRankCovariance,
    SpdFactor,
    check_noise,
    gaussian_entropy,
    gaussian_logpdf,
    logsumexp,
)
from .retina import CellLayout, Offset, RetinaPlacements, RetinaSpec, RetinalTransform, apply, identity_transform

logger = logging.getLogger(__name__)

PSI_FLOOR = 1e-8


def _vector(name: str, value, length: Optional[int] = None) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 1 or (length is not None and arr.shape[0] != length):
        raise ContractViolation(f"{name} must be a vector of length {length}, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class FAModel:
    """x = mu + W z + e with z ~ N(0, I_K) and e ~ N(0, diag(psi))."""

    mu: np.ndarray
    W: np.ndarray
    psi: np.ndarray

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        if W.ndim != 2:
            raise ContractViolation(f"W must be a D x K matrix, got shape {W.shape}")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "mu", _vector("mu", self.mu, W.shape[0]))
        object.__setattr__(self, "psi", check_noise(_vector("psi", self.psi, W.shape[0])))
        if W.shape[1] > W.shape[0]:
            raise ContractViolation(f"K={W.shape[1]} exceeds D={W.shape[0]}")

    @property
    def D(self) -> int:
        return self.W.shape[0]

    @property
    def K(self) -> int:
        return self.W.shape[1]

    def marginal_variance(self) -> np.ndarray:
        return np.sum(self.W ** 2, axis=1) + self.psi


@dataclass(frozen=True, eq=False)
class ProjectedFA:
    """
    The FA model seen through one placement (or a stack of placements):
    y ~ N(mu, W W^T + diag(psi)), with W = V W_x and mu = V mu_x.
    """

    offset_id: Any
    mu: np.ndarray
    W: np.ndarray
    psi: np.ndarray
    layout: Optional[CellLayout] = field(default=None)

    def __post_init__(self):
        W = np.asarray(self.W, dtype=np.float64)
        if W.ndim != 2:
            raise ContractViolation(f"W must be 2-D, got shape {W.shape}")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "mu", _vector("mu", self.mu, W.shape[0]))
        psi = _vector("psi", self.psi)
        if psi.shape[0] != W.shape[0]:
            raise ContractViolation(
                f"psi has {psi.shape[0]} entries but offset {self.offset_id} has {W.shape[0]} active cells"
            )
        object.__setattr__(self, "psi", check_noise(psi, self.offset_id))

    @property
    def dim(self) -> int:
        return self.W.shape[0]

    @property
    def K(self) -> int:
        return self.W.shape[1]

    @cached_property
    def covariance(self) -> LowRankCovariance:
        return LowRankCovariance(self.W, self.psi, self.offset_id)

    @cached_property
    def precision_increment(self) -> np.ndarray:
        """W^T diag(psi)^-1 W, this glimpse's contribution to the latent precision."""
        return self.W.T @ self.covariance.scaled_loadings

    @cached_property
    def posterior_factor(self) -> SpdFactor:
        return SpdFactor.of(np.eye(self.K) + self.precision_increment)

    @cached_property
    def marginal_logdet(self) -> float:
        return self.covariance.logdet()

    def information(self, y: np.ndarray) -> np.ndarray:
        return self.covariance.scaled_loadings.T @ (y - self.mu)

    def check_glimpse(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (self.dim,):
            raise ContractViolation(f"glimpse of shape {y.shape} does not match offset {self.offset_id} ({self.dim})")
        return y


@dataclass(frozen=True, eq=False)
class MoFAModel:
    components: Tuple[FAModel, ...]
    pi: np.ndarray

    def __post_init__(self):
        components = tuple(self.components)
        pi = _vector("pi", self.pi, len(components))
        if not components:
            raise ContractViolation("a mixture needs at least one component")
        if np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-12:
            raise ContractViolation(f"mixing proportions must be non-negative and sum to 1, got {pi}")
        if len({c.D for c in components}) != 1:
            raise ContractViolation("mixture components disagree on D")
        object.__setattr__(self, "components", components)
        object.__setattr__(self, "pi", pi)

    @classmethod
    def single(cls, fa: FAModel) -> "MoFAModel":
        return cls((fa,), np.ones(1))

    @property
    def M(self) -> int:
        return len(self.components)

    @property
    def D(self) -> int:
        return self.components[0].D

    @property
    def K(self) -> int:
        return max(c.K for c in self.components)


@dataclass(frozen=True, eq=False)
class Posterior:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def prior(cls, K: int) -> "Posterior":
        return cls(np.zeros(K), np.eye(K))

    @property
    def K(self) -> int:
        return self.mean.shape[0]

    def entropy(self) -> float:
        return gaussian_entropy(self.K, SpdFactor.of(self.cov).logdet())


@dataclass(frozen=True, eq=False)
class MixturePosterior:
    responsibilities: np.ndarray
    posteriors: Tuple[Posterior, ...]

    def entropy_bits(self) -> float:
        return component_entropy(self.responsibilities)


def posterior_from_information(precision: np.ndarray, information: np.ndarray) -> Posterior:
    factor = SpdFactor.of(precision)
    return Posterior(factor.solve(information), factor.inverse())


def project(fa: FAModel, rt: RetinalTransform, psi_y, offset_id=None) -> ProjectedFA:
    """mu_y = V mu and W_a = V W through the sparse operator; psi_y is a free per-offset parameter."""
    psi_y = _vector("psi_y", psi_y)
    if psi_y.shape[0] != rt.n_active:
        raise ContractViolation(f"psi_y has {psi_y.shape[0]} entries, placement has {rt.n_active} active cells")
    if rt.n_pixels != fa.D:
        raise ContractViolation(f"model has D={fa.D} but transform covers {rt.n_pixels} pixels")
    return ProjectedFA(
        offset_id=offset_id if offset_id is not None else tuple(rt.offset),
        mu=rt.matrix @ fa.mu,
        W=np.asarray(rt.matrix @ fa.W),
        psi=psi_y,
        layout=rt.layout,
    )


def posterior(pfa: ProjectedFA, y) -> Posterior:
    """Sigma^-1 = I + W^T Psi^-1 W; mean = Sigma W^T Psi^-1 (y - mu)."""
    y = pfa.check_glimpse(y)
    factor = pfa.posterior_factor
    return Posterior(factor.solve(pfa.information(y)), factor.inverse())


def reconstruct(fa: FAModel, post: Posterior) -> Tuple[np.ndarray, np.ndarray]:
    """x_hat = mu + W mean and the predictive variance diag(W Sigma W^T) + psi."""
    if post.K != fa.K:
        raise ContractViolation(f"posterior has K={post.K}, model has K={fa.K}")
    x_hat = fa.mu + fa.W @ post.mean
    pred_var = np.sum((fa.W @ post.cov) * fa.W, axis=1) + fa.psi
    return x_hat, pred_var


def marginal_loglik(pfa: ProjectedFA, y) -> float:
    y = pfa.check_glimpse(y)
    return gaussian_logpdf(y, pfa.mu, pfa.marginal_logdet, pfa.covariance.solve)


def responsibilities(pfas: Sequence[ProjectedFA], pi, y) -> MixturePosterior:
    pi = _vector("pi", pi, len(pfas))
    if not len(pfas):
        raise ContractViolation("responsibilities need at least one component")
    log_joint = np.full(len(pfas), -np.inf)
    for m, (pfa, weight) in enumerate(zip(pfas, pi)):
        if weight <= 0:
            continue
        try:
            log_joint[m] = np.log(weight) + marginal_loglik(pfa, y)
        except NumericalError as exc:
            logger.debug("component %d dropped from responsibilities: %s", m, exc)
    total = logsumexp(log_joint)
    if not np.isfinite(total):
        raise NumericalError("every mixture component is degenerate for this glimpse")
    r = np.exp(log_joint - total)
    posts = tuple(
        posterior(pfa, y) if r_m > 0 else Posterior.prior(pfa.K) for pfa, r_m in zip(pfas, r)
    )
    return MixturePosterior(r, posts)


def fuse_evidence(pfas: Sequence[ProjectedFA], ys: Sequence[np.ndarray]) -> Tuple[float, Posterior]:
    """
    Stacked marginal log density and latent posterior of several glimpses
    without forming the stacked model: with A = I + sum_j W_j^T Psi_j^-1 W_j
    and b = sum_j W_j^T Psi_j^-1 r_j, the quadratic form is
    sum_j r_j^T Psi_j^-1 r_j - b^T A^-1 b and the log determinant is
    sum log psi + log|A|.
    """
    if not pfas or len(pfas) != len(ys):
        raise ContractViolation(f"{len(pfas)} projections for {len(ys)} glimpses")
    K = pfas[0].K
    precision, information = np.eye(K), np.zeros(K)
    quad, logdet, dim = 0.0, 0.0, 0
    for pfa, y in zip(pfas, ys):
        residual = pfa.check_glimpse(y) - pfa.mu
        precision = precision + pfa.precision_increment
        information = information + pfa.covariance.scaled_loadings.T @ residual
        quad += float(np.sum(residual ** 2 / pfa.psi))
        logdet += float(np.sum(np.log(pfa.psi)))
        dim += pfa.dim
    factor = SpdFactor.of(precision)
    mean = factor.solve(information)
    quad -= float(information @ mean)
    log_density = -0.5 * (quad + logdet + factor.logdet() + dim * LOG_2PI)
    return log_density, Posterior(mean, factor.inverse())


def fused_responsibilities(evidence: Sequence[Sequence[ProjectedFA]], pi, ys) -> MixturePosterior:
    """Responsibilities from the full stacked evidence, then each component's fused posterior."""
    pi = _vector("pi", pi, len(evidence))
    log_joint = np.full(len(evidence), -np.inf)
    posts = []
    for m, (pfas, weight) in enumerate(zip(evidence, pi)):
        if weight <= 0:
            posts.append(Posterior.prior(pfas[0].K))
            continue
        try:
            log_density, post = fuse_evidence(pfas, ys)
        except NumericalError as exc:
            logger.debug("component %d dropped from responsibilities: %s", m, exc)
            posts.append(Posterior.prior(pfas[0].K))
            continue
        log_joint[m] = np.log(weight) + log_density
        posts.append(post)
    total = logsumexp(log_joint)
    if not np.isfinite(total):
        raise NumericalError("every mixture component is degenerate for these glimpses")
    return MixturePosterior(np.exp(log_joint - total), tuple(posts))


def mixture_reconstruct(mofa: MoFAModel, mp: MixturePosterior) -> Tuple[np.ndarray, np.ndarray]:
    """Responsibility-weighted mean of component reconstructions and of their predictive variances."""
    x_hat = np.zeros(mofa.D)
    var = np.zeros(mofa.D)
    for fa, post, r_m in zip(mofa.components, mp.posteriors, mp.responsibilities):
        if r_m == 0:
            continue
        x_m, var_m = reconstruct(fa, post)
        x_hat += r_m * x_m
        var += r_m * var_m
    return x_hat, var


def component_entropy(r) -> float:
    """Entropy in bits of the component posterior, with 0 log 0 = 0."""
    r = np.asarray(r, dtype=np.float64)
    return float(_entropy(r, base=2)) if r.size > 1 else 0.0


def _check_training_data(X, K: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ContractViolation(f"training data must be N x D, got shape {X.shape}")
    N, D = X.shape
    if K < 1 or N <= K:
        raise ContractViolation(f"need N > K >= 1, got N={N}, K={K}")
    if K >= min(N, D):
        raise ContractViolation(f"K={K} leaves no discarded eigenvalues (N={N}, D={D})")
    return X


def fit_ppca(X, K: int) -> FAModel:
    """Closed-form probabilistic PCA: W = U_K (Lambda_K - sigma^2 I)^1/2, psi = sigma^2."""
    X = _check_training_data(X, K)
    pca = PCA(n_components=K, svd_solver="full").fit(X)
    sigma2 = max(float(pca.noise_variance_), 1e-12 * float(pca.explained_variance_[0]), np.finfo(float).tiny)
    scale = np.sqrt(np.maximum(pca.explained_variance_ - sigma2, 0.0))
    W = pca.components_.T * scale
    return FAModel(pca.mean_, W, np.full(X.shape[1], sigma2))


def components_for_variance(X, fraction: float = 0.9) -> int:
    """Smallest number of principal components explaining `fraction` of the variance."""
    ratios = PCA(svd_solver="full").fit(np.asarray(X, dtype=np.float64)).explained_variance_ratio_
    return int(np.searchsorted(np.cumsum(ratios), fraction) + 1)


def fa_loglik(fa: FAModel, X) -> float:
    """Total x-space log-likelihood of the rows of X."""
    X = np.asarray(X, dtype=np.float64)
    Xc = X - fa.mu
    cov = LowRankCovariance(fa.W, fa.psi)
    quad = np.sum(Xc * cov.solve(Xc.T).T)
    return float(-0.5 * quad - 0.5 * X.shape[0] * (cov.logdet() + fa.D * LOG_2PI))


def _loglik_from_scatter(W, psi, S, N) -> float:
    cov = LowRankCovariance(W, psi)
    return float(-0.5 * N * (S.shape[0] * LOG_2PI + cov.logdet() + np.trace(cov.solve(S))))


class FAFit(NamedTuple):
    model: FAModel
    loglik_trace: List[float]
    converged: bool


def fit_fa_em(X, K: int, iters: int = 500, tol: float = 1e-6, init: Optional[FAModel] = None) -> FAFit:
    """
    Factor analysis by EM, started from the PPCA solution unless `init` is
    given. The log-likelihood trace never decreases.
    """
    X = _check_training_data(X, K)
    N, D = X.shape
    mu = X.mean(axis=0)
    Xc = X - mu
    S = Xc.T @ Xc / N
    start = init or fit_ppca(X, K)
    W, psi = start.W.copy(), start.psi.copy()
    trace = [_loglik_from_scatter(W, psi, S, N)]
    best = (trace[0], W, psi)
    converged = False
    for it in range(iters):
        cov = LowRankCovariance(W, psi)
        beta = cov.capacitance.solve(cov.scaled_loadings.T)
        S_beta = S @ beta.T
        Ezz = np.eye(K) - beta @ W + beta @ S_beta
        W = SpdFactor.of(Ezz).solve(S_beta.T).T
        psi = np.maximum(np.diag(S) - np.sum(W * S_beta, axis=1), PSI_FLOOR)
        ll = _loglik_from_scatter(W, psi, S, N)
        trace.append(ll)
        if ll > best[0]:
            best = (ll, W, psi)
        if abs(ll - trace[-2]) <= tol * abs(trace[-2]):
            converged = True
            break
    if not converged:
        logger.warning("factor analysis EM stopped after %d iterations without converging", iters)
    _, W, psi = best
    return FAFit(FAModel(mu, W, psi), trace, converged)


def fit_mofa_x(X, K: int, M: int, seed: int = 0) -> MoFAModel:
    """k-means partition (10 restarts, fixed seed), then PPCA within each cluster."""
    X = np.asarray(X, dtype=np.float64)
    N, D = X.shape
    if N <= M * K:
        raise ContractViolation(f"need N > M*K, got N={N}, M={M}, K={K}")
    if M == 1:
        return MoFAModel.single(fit_ppca(X, K))
    labels = KMeans(n_clusters=M, n_init=10, random_state=seed).fit(X).labels_
    global_var = float(np.mean(np.var(X, axis=0))) or 1.0
    components = []
    for m in range(M):
        members = X[labels == m]
        k_eff = min(K, members.shape[0] - 1, D - 1)
        if k_eff < K:
            logger.warning("cluster %d has %d members; fitting %d of %d factors", m, members.shape[0], max(k_eff, 0), K)
        if k_eff < 1:
            mean = members.mean(axis=0) if members.shape[0] else X[np.argmax(np.sum((X - X.mean(0)) ** 2, axis=1))]
            components.append(FAModel(mean, np.zeros((D, K)), np.full(D, global_var)))
            continue
        fa = fit_ppca(members, k_eff)
        components.append(FAModel(fa.mu, np.hstack([fa.W, np.zeros((D, K - k_eff))]), fa.psi))
    pi = np.bincount(labels, minlength=M) / N
    return MoFAModel(tuple(components), pi / pi.sum())


def psi_y_init(rt: RetinalTransform, psi_x) -> np.ndarray:
    """diag(V diag(psi_x) V^T): for an s x s cell, the mean of its pixels' psi divided by s^2."""
    psi_x = check_noise(_vector("psi_x", psi_x, rt.n_pixels))
    return np.asarray(rt.matrix.multiply(rt.matrix) @ psi_x).ravel()


@dataclass(frozen=True, eq=False)
class GlimpseModel:
    """
    An x-space mixture together with the retina it is observed through: the
    offset table and one glimpse-noise vector per (component, offset).
    A plain FA model is the M=1 case.
    """

    mixture: MoFAModel
    retina: RetinaSpec
    image_shape: Tuple[int, int]
    offsets: Tuple[Offset, ...]
    psi_y: Tuple[Tuple[np.ndarray, ...], ...]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "image_shape", (int(self.image_shape[0]), int(self.image_shape[1])))
        object.__setattr__(self, "offsets", tuple(Offset(int(o[0]), int(o[1])) for o in self.offsets))
        if self.image_shape[0] * self.image_shape[1] != self.mixture.D:
            raise ContractViolation(f"image shape {self.image_shape} does not match D={self.mixture.D}")
        psi_y = tuple(tuple(_vector("psi_y", p) for p in row) for row in self.psi_y)
        if len(psi_y) != self.mixture.M or any(len(row) != len(self.offsets) for row in psi_y):
            raise ContractViolation("psi_y must hold one vector per component and offset")
        counts = self.placements.active_counts()
        for row in psi_y:
            for a, p in enumerate(row):
                if p.shape[0] != counts[a]:
                    raise ContractViolation(f"psi_y for offset {a} has {p.shape[0]} entries, expected {counts[a]}")
        object.__setattr__(self, "psi_y", psi_y)

    @classmethod
    def from_x_model(cls, mixture, retina: RetinaSpec, image_shape, offsets, metadata=None) -> "GlimpseModel":
        if isinstance(mixture, FAModel):
            mixture = MoFAModel.single(mixture)
        placements = RetinaPlacements(retina, image_shape, offsets)
        psi_y = tuple(tuple(psi_y_init(rt, fa.psi) for rt in placements) for fa in mixture.components)
        return cls(mixture, retina, placements.image_shape, placements.offsets, psi_y, dict(metadata or {}))

    def with_psi_y(self, psi_y, **metadata) -> "GlimpseModel":
        return replace(self, psi_y=psi_y, metadata={**self.metadata, **metadata})

    @cached_property
    def placements(self) -> RetinaPlacements:
        return RetinaPlacements(self.retina, self.image_shape, self.offsets)

    @cached_property
    def _cache(self) -> dict:
        return {}

    @property
    def n_components(self) -> int:
        return self.mixture.M

    @property
    def n_offsets(self) -> int:
        return len(self.offsets)

    @property
    def is_mixture(self) -> bool:
        return self.mixture.M > 1

    def projection(self, m: int, offset_id: int) -> ProjectedFA:
        key = ("single", m, offset_id)
        if key not in self._cache:
            self._cache[key] = project(
                self.mixture.components[m], self.placements[offset_id], self.psi_y[m][offset_id], offset_id
            )
        return self._cache[key]

    def full_projection(self, m: int) -> ProjectedFA:
        key = ("full", m)
        if key not in self._cache:
            fa = self.mixture.components[m]
            self._cache[key] = project(fa, identity_transform(*self.image_shape), fa.psi, offset_id="full")
        return self._cache[key]

    def glimpse(self, offset_id: int, x) -> np.ndarray:
        return apply(self.placements[offset_id], x)

    def infer(self, glimpses: Sequence[Tuple[int, np.ndarray]]) -> MixturePosterior:
        """Responsibilities from the full stacked evidence, then per-component posteriors."""
        if not glimpses:
            return MixturePosterior(
                self.mixture.pi.copy(), tuple(Posterior.prior(fa.K) for fa in self.mixture.components)
            )
        ys = [y for _, y in glimpses]
        evidence = [
            [self.projection(m, a) for a, _ in glimpses] for m in range(self.n_components)
        ]
        return fused_responsibilities(evidence, self.mixture.pi, ys)

    def infer_full(self, x) -> MixturePosterior:
        x = np.asarray(x, dtype=np.float64).ravel()
        evidence = [[self.full_projection(m)] for m in range(self.n_components)]
        return fused_responsibilities(evidence, self.mixture.pi, [x])

    def reconstruct(self, mp: MixturePosterior) -> Tuple[np.ndarray, np.ndarray]:
        return mixture_reconstruct(self.mixture, mp)
