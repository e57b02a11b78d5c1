"""
Numerically stable Gaussian primitives shared by the rest of the package.

All entropies and log densities are in nats. Determinants are never formed
explicitly; everything goes through a Cholesky factor.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
from scipy import linalg
from scipy.linalg import lapack
from scipy.special import logsumexp as _scipy_logsumexp
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt

from .exceptions import ContractViolation, DegenerateNoiseError, NotPositiveDefiniteError

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
LOG_2PIE = float(np.log(2.0 * np.pi * np.e))
JITTER_SCALE = 1e-10


def _potrf(S: np.ndarray, jitter: float) -> np.ndarray:
    A = np.array(S, dtype=np.float64, copy=True)
    if jitter:
        A[np.diag_indices_from(A)] += jitter
    L, info = lapack.dpotrf(A, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(pivot=info - 1)
    if info < 0:
        raise ContractViolation(f"illegal argument {-info} passed to dpotrf")
    return L


@dataclass(frozen=True)
class SpdFactor:
    """Lower-triangular Cholesky factor of a symmetric positive-definite matrix."""

    lower: np.ndarray
    jittered: bool = False

    @classmethod
    def of(cls, S: np.ndarray, allow_jitter: bool = True) -> "SpdFactor":
        """Factorize S; on failure retry once with 1e-10 * trace/D added to the diagonal."""
        S = np.asarray(S, dtype=np.float64)
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise ContractViolation(f"expected a square matrix, got shape {S.shape}")
        if S.shape[0] == 0:
            return cls(np.zeros((0, 0)))
        if not allow_jitter:
            return cls(_potrf(S, 0.0))

        jitter = JITTER_SCALE * max(float(np.trace(S)) / S.shape[0], np.finfo(float).tiny)
        retrying = Retrying(
            stop=stop_after_attempt(2),
            retry=retry_if_exception_type(NotPositiveDefiniteError),
            reraise=True,
        )
        for attempt in retrying:
            with attempt:
                retried = attempt.retry_state.attempt_number > 1
                if retried:
                    logger.warning("adding diagonal jitter %.3g to a %d-dim factorization", jitter, S.shape[0])
                L = _potrf(S, jitter if retried else 0.0)
        return cls(L, jittered=retried)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.lower))))

    def solve(self, b: np.ndarray) -> np.ndarray:
        return linalg.cho_solve((self.lower, True), b, check_finite=False)

    def inverse(self) -> np.ndarray:
        inv = self.solve(np.eye(self.dim))
        return 0.5 * (inv + inv.T)

    def reconstruct(self) -> np.ndarray:
        return self.lower @ self.lower.T


def chol_logdet(S: np.ndarray) -> float:
    """log|S| through a triangular factorization."""
    return SpdFactor.of(S).logdet()


def check_noise(psi: np.ndarray, offset_id=None) -> np.ndarray:
    psi = np.asarray(psi, dtype=np.float64)
    if psi.size and not (np.all(np.isfinite(psi)) and np.all(psi > 0)):
        bad = int(np.flatnonzero(~(np.isfinite(psi) & (psi > 0)))[0])
        raise DegenerateNoiseError(f"degenerate noise: entry {bad} is {psi[bad]!r}", offset_id=offset_id)
    return psi


class LowRankCovariance:
    """
    C = W W^T + diag(psi), handled through the K x K capacitance
    A = I_K + W^T diag(psi)^-1 W.
    """

    def __init__(self, W: np.ndarray, psi: np.ndarray, offset_id=None):
        self.W = np.atleast_2d(np.asarray(W, dtype=np.float64))
        self.psi = check_noise(psi, offset_id)
        if self.W.shape[0] != self.psi.shape[0]:
            raise ContractViolation(f"W has {self.W.shape[0]} rows but psi has {self.psi.shape[0]} entries")
        self.offset_id = offset_id

    @property
    def dim(self) -> int:
        return self.psi.shape[0]

    @cached_property
    def scaled_loadings(self) -> np.ndarray:
        """diag(psi)^-1 W"""
        return self.W / self.psi[:, None]

    @cached_property
    def capacitance(self) -> SpdFactor:
        K = self.W.shape[1]
        return SpdFactor.of(np.eye(K) + self.W.T @ self.scaled_loadings)

    def logdet(self) -> float:
        return float(np.sum(np.log(self.psi))) + self.capacitance.logdet()

    def solve(self, b: np.ndarray) -> np.ndarray:
        """C^-1 b for a vector or a (dim, n) matrix."""
        b = np.asarray(b, dtype=np.float64)
        scaled = b / self.psi[:, None] if b.ndim == 2 else b / self.psi
        return scaled - self.scaled_loadings @ self.capacitance.solve(self.W.T @ scaled)

    def inverse_diagonal(self) -> np.ndarray:
        G = self.capacitance.solve(self.scaled_loadings.T).T
        return 1.0 / self.psi - np.sum(G * self.scaled_loadings, axis=1)

    def dense(self) -> np.ndarray:
        return self.W @ self.W.T + np.diag(self.psi)


def lowrank_logdet(W: np.ndarray, psi: np.ndarray) -> float:
    """log|W W^T + diag(psi)| = log|diag(psi)| + log|I_K + W^T diag(psi)^-1 W|."""
    return LowRankCovariance(W, psi).logdet()


def gaussian_entropy(dim: int, logdet_cov: float) -> float:
    """Differential entropy in nats of a dim-dimensional Gaussian."""
    if dim < 1:
        raise ContractViolation(f"entropy needs dim >= 1, got {dim}")
    return 0.5 * dim * LOG_2PIE + 0.5 * logdet_cov


def gaussian_logpdf(
    y: np.ndarray,
    mean: np.ndarray,
    cov_logdet: float,
    cov_solve: Callable[[np.ndarray], np.ndarray],
) -> float:
    y = np.asarray(y, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    if y.shape != mean.shape or y.ndim != 1:
        raise ContractViolation(f"dimension mismatch: y {y.shape} vs mean {mean.shape}")
    r = y - mean
    return float(-0.5 * r @ cov_solve(r) - 0.5 * cov_logdet - 0.5 * y.shape[0] * LOG_2PI)


def logsumexp(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0 or np.all(values == -np.inf):
        return -np.inf
    return float(_scipy_logsumexp(values))
