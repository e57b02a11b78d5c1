"""
Combining several glimpses of one image into a single latent posterior.

Static fusion treats the glimpses as one stacked FA observation and adds
their precisions. The LDS filter lets z drift between glimpses,
z_j = alpha z_{j-1} + sqrt(1 - alpha^2) e_j, which forgets old evidence at
a rate set by alpha.
"""

import logging
from dataclasses import dataclass
from typing import Iterator, List, Sequence, Tuple

import numpy as np

from .exceptions import ContractViolation
from .models import (
    GlimpseModel,
    MixturePosterior,
    Posterior,
    ProjectedFA,
    marginal_loglik,
    posterior_from_information,
)
from .numerics import SpdFactor, logsumexp

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Glimpse:
    offset_id: int
    y: np.ndarray
    projection: ProjectedFA

    def __post_init__(self):
        object.__setattr__(self, "y", self.projection.check_glimpse(self.y))


class GlimpseSequence:
    """An ordered run of glimpses from one retina layout and one latent model."""

    def __init__(self, glimpses: Sequence[Glimpse]):
        self.glimpses: Tuple[Glimpse, ...] = tuple(glimpses)
        layouts = {g.projection.layout for g in self.glimpses if g.projection.layout is not None}
        if len(layouts) > 1:
            raise ContractViolation("glimpses in one sequence come from different retina layouts")
        if len({g.projection.K for g in self.glimpses}) > 1:
            raise ContractViolation("glimpses in one sequence disagree on the latent dimension")

    @classmethod
    def from_model(cls, model: GlimpseModel, observations: Sequence[Tuple[int, np.ndarray]], component: int = 0):
        return cls(Glimpse(a, y, model.projection(component, a)) for a, y in observations)

    def __len__(self) -> int:
        return len(self.glimpses)

    def __iter__(self) -> Iterator[Glimpse]:
        return iter(self.glimpses)

    def __getitem__(self, j: int) -> Glimpse:
        return self.glimpses[j]

    @property
    def J(self) -> int:
        return len(self.glimpses)

    @property
    def K(self) -> int:
        return self.glimpses[0].projection.K

    @property
    def offset_ids(self) -> Tuple[int, ...]:
        return tuple(g.offset_id for g in self.glimpses)

    def permuted(self, order: Sequence[int]) -> "GlimpseSequence":
        return GlimpseSequence([self.glimpses[j] for j in order])


@dataclass(frozen=True, eq=False)
class StackedModel:
    """The extended FA model for the concatenated glimpse vector."""

    mu: np.ndarray
    W: np.ndarray
    psi: np.ndarray
    offset_ids: Tuple[int, ...]
    segments: Tuple[Tuple[int, int], ...]

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def as_projection(self) -> ProjectedFA:
        offset_id = self.offset_ids[0] if len(self.offset_ids) == 1 else self.offset_ids
        return ProjectedFA(offset_id, self.mu, self.W, self.psi)


def stack_projections(projections: Sequence[ProjectedFA], offset_ids: Sequence[int] = ()) -> StackedModel:
    if not projections:
        raise ContractViolation("stacking needs at least one glimpse")
    sizes = np.cumsum([0] + [p.dim for p in projections])
    return StackedModel(
        mu=np.concatenate([p.mu for p in projections]),
        W=np.vstack([p.W for p in projections]),
        psi=np.concatenate([p.psi for p in projections]),
        offset_ids=tuple(offset_ids) or tuple(p.offset_id for p in projections),
        segments=tuple(zip(sizes[:-1].tolist(), sizes[1:].tolist())),
    )


def stack(seq: GlimpseSequence) -> Tuple[StackedModel, np.ndarray]:
    if seq.J < 1:
        raise ContractViolation("stacking needs at least one glimpse")
    model = stack_projections([g.projection for g in seq], seq.offset_ids)
    return model, np.concatenate([g.y for g in seq])


def _accumulate(glimpses: Sequence[Glimpse], K: int) -> Tuple[np.ndarray, np.ndarray]:
    precision = np.eye(K)
    information = np.zeros(K)
    for g in glimpses:
        precision = precision + g.projection.precision_increment
        information = information + g.projection.information(g.y)
    return precision, information


def fused_posterior(seq: GlimpseSequence) -> Posterior:
    """Posterior of z under the stacked model, by precision accumulation."""
    if seq.J < 1:
        raise ContractViolation("fusion needs at least one glimpse")
    return posterior_from_information(*_accumulate(seq.glimpses, seq.K))


def lds_filter(seq: GlimpseSequence, alpha: float) -> List[Posterior]:
    """Filtered posterior after each glimpse under the variance-preserving random walk."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractViolation(f"alpha must lie in [0, 1], got {alpha}")
    K = seq.K
    mean, cov = np.zeros(K), np.eye(K)
    filtered = []
    for j, g in enumerate(seq):
        if j:
            mean = alpha * mean
            cov = alpha ** 2 * cov + (1.0 - alpha ** 2) * np.eye(K)
        prior_precision = SpdFactor.of(cov).inverse()
        post = posterior_from_information(
            prior_precision + g.projection.precision_increment,
            prior_precision @ mean + g.projection.information(g.y),
        )
        mean, cov = post.mean, post.cov
        filtered.append(post)
    return filtered


def fused_mixture_posterior(sequences: Sequence[GlimpseSequence], pi) -> MixturePosterior:
    """
    One sequence per component over the same glimpse values. Responsibilities
    come from the stacked marginal of each component; each component then
    fuses its own glimpses.
    """
    pi = np.asarray(pi, dtype=np.float64)
    if len(sequences) != pi.shape[0]:
        raise ContractViolation(f"{len(sequences)} component sequences for {pi.shape[0]} mixing proportions")
    log_joint = np.full(len(sequences), -np.inf)
    for m, seq in enumerate(sequences):
        if pi[m] > 0:
            model, y = stack(seq)
            log_joint[m] = np.log(pi[m]) + marginal_loglik(model.as_projection(), y)
    r = np.exp(log_joint - logsumexp(log_joint))
    return MixturePosterior(r, tuple(fused_posterior(seq) for seq in sequences))
