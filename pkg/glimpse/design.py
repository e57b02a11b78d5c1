"""
Bayesian experimental design over retina offsets.

A design is a set of offsets to fixate. Its score is the expected
information gain about the latents: exact for a single FA model, an upper
bound (entropy of pi plus the weighted component gains) for a mixture.
Scores never look at glimpse values, so designs can be chosen before any
test image is seen.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from itertools import combinations, combinations_with_replacement
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp as _logsumexp
from scipy.stats import entropy as _entropy

from .exceptions import ContractViolation, DesignSearchError
from .fusion import stack_projections
from .models import GlimpseModel, ProjectedFA
from .numerics import LOG_2PI, LowRankCovariance, chol_logdet
from .parallel import ordered_map
from .retina import Offset

logger = logging.getLogger(__name__)

NATS_TO_BITS = 1.0 / math.log(2.0)
MC_CHUNK = 10_000


class ScoreKind(str, Enum):
    EXACT = "exact"
    UPPER_BOUND = "upper_bound"


@dataclass(frozen=True)
class Design:
    offset_ids: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "offset_ids", tuple(int(a) for a in self.offset_ids))

    @property
    def J(self) -> int:
        return len(self.offset_ids)

    def has_repeats(self) -> bool:
        return len(set(self.offset_ids)) < self.J

    def offsets(self, table: Sequence[Offset]) -> List[Offset]:
        return [table[a] for a in self.offset_ids]


@dataclass(frozen=True)
class DesignScore:
    design: Design
    eig_nats: float
    kind: ScoreKind

    @property
    def eig_bits(self) -> float:
        return self.eig_nats * NATS_TO_BITS

    def to_json(self, table: Sequence[Offset]) -> Dict[str, Any]:
        return {
            "design": [list(o) for o in self.design.offsets(table)],
            "offset_ids": list(self.design.offset_ids),
            "eig_nats": self.eig_nats,
            "eig_bits": self.eig_bits,
            "kind": self.kind.value,
        }

    @classmethod
    def from_json(cls, document: Dict[str, Any], table: Sequence[Offset]) -> "DesignScore":
        table = [Offset(*o) for o in table]
        try:
            ids = [table.index(Offset(int(o[0]), int(o[1]))) for o in document["design"]]
        except ValueError:
            raise ContractViolation(f"design {document['design']} uses an offset outside the model's table") from None
        return cls(Design(tuple(ids)), float(document.get("eig_nats", 0.0)), ScoreKind(document.get("kind", "exact")))


def _checked(pfas: Sequence[ProjectedFA]) -> Sequence[ProjectedFA]:
    if not pfas:
        raise ContractViolation("a design needs at least one glimpse")
    if len({p.K for p in pfas}) > 1:
        raise ContractViolation("projections in one design disagree on K")
    return pfas


def eig_fa(pfas: Sequence[ProjectedFA]) -> float:
    """Information gain of a design under one FA model: 1/2 log|I + sum_j W_j^T Psi_j^-1 W_j|."""
    pfas = _checked(pfas)
    precision = np.eye(pfas[0].K) + sum(p.precision_increment for p in pfas)
    return 0.5 * chol_logdet(precision)


def eig_fa_observation_space(pfas: Sequence[ProjectedFA]) -> float:
    """The same gain evaluated densely in glimpse space: 1/2 (log|W W^T + Psi| - log|Psi|)."""
    stacked = stack_projections(_checked(pfas))
    cov = stacked.W @ stacked.W.T + np.diag(stacked.psi)
    return 0.5 * (chol_logdet(cov) - float(np.sum(np.log(stacked.psi))))


def _per_component(component_pfas) -> List[Sequence[ProjectedFA]]:
    return [[p] if isinstance(p, ProjectedFA) else list(p) for p in component_pfas]


def eig_mofa_upper(component_pfas, pi) -> float:
    """H(pi) + sum_m pi_m EIG_m, in nats; tight when the components are well separated."""
    components = _per_component(component_pfas)
    pi = np.asarray(pi, dtype=np.float64)
    if len(components) != pi.shape[0]:
        raise ContractViolation(f"{len(components)} components for {pi.shape[0]} mixing proportions")
    gains = np.array([eig_fa(pfas) if w > 0 else 0.0 for pfas, w in zip(components, pi)])
    return float(_entropy(pi)) + float(pi @ gains)


def eig_monte_carlo(
    component_pfas, pi=None, n: int = 100_000, seed: Union[int, np.random.Generator] = 0
) -> Tuple[float, float]:
    """
    Monte-Carlo estimate of the mutual information between (component,
    latents) and the design's glimpses, with its standard error. Each sample
    scores log p(y | c, z) - log p(y) against the exact mixture marginal.
    """
    components = [stack_projections(pfas).as_projection() for pfas in _per_component(component_pfas)]
    pi = np.ones(1) if pi is None else np.asarray(pi, dtype=np.float64)
    if len(components) != pi.shape[0]:
        raise ContractViolation(f"{len(components)} components for {pi.shape[0]} mixing proportions")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    covs = [LowRankCovariance(p.W, p.psi) for p in components]
    logdets = np.array([c.logdet() for c in covs])
    dim = components[0].dim
    values = []
    for start in range(0, n, MC_CHUNK):
        size = min(MC_CHUNK, n - start)
        labels = rng.choice(len(components), size=size, p=pi)
        Y = np.empty((size, dim))
        log_cond = np.empty(size)
        for m, p in enumerate(components):
            rows = np.flatnonzero(labels == m)
            z = rng.standard_normal((rows.size, p.K))
            noise = rng.standard_normal((rows.size, dim)) * np.sqrt(p.psi)
            Y[rows] = p.mu + z @ p.W.T + noise
            log_cond[rows] = -0.5 * (np.sum(noise ** 2 / p.psi, axis=1) + np.sum(np.log(p.psi)) + dim * LOG_2PI)
        log_marg = np.empty((size, len(components)))
        for m, (p, cov) in enumerate(zip(components, covs)):
            centered = Y - p.mu
            quad = np.sum(centered * cov.solve(centered.T).T, axis=1)
            with np.errstate(divide="ignore"):
                log_marg[:, m] = np.log(pi[m]) - 0.5 * (quad + logdets[m] + dim * LOG_2PI)
        values.append(log_cond - _logsumexp(log_marg, axis=1))
    values = np.concatenate(values)
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(values.size))


def score_design(model: GlimpseModel, design: Design) -> DesignScore:
    if design.J < 1:
        raise ContractViolation("a design needs at least one offset")
    if model.n_components == 1:
        gain = eig_fa([model.projection(0, a) for a in design.offset_ids])
        return DesignScore(design, gain, ScoreKind.EXACT)
    per_component = [[model.projection(m, a) for a in design.offset_ids] for m in range(model.n_components)]
    return DesignScore(design, eig_mofa_upper(per_component, model.mixture.pi), ScoreKind.UPPER_BOUND)


def _candidates(model: GlimpseModel, offset_ids: Optional[Sequence[int]]) -> List[int]:
    ids = sorted(set(range(model.n_offsets) if offset_ids is None else (int(a) for a in offset_ids)))
    if not ids:
        raise ContractViolation("design search needs at least one candidate offset")
    for m in range(model.n_components):
        for a in ids:
            model.projection(m, a).precision_increment
    return ids


def _ranked(scores: Sequence[DesignScore]) -> List[DesignScore]:
    return sorted(scores, key=lambda s: (-s.eig_nats, s.design.offset_ids))


def search_exhaustive(
    model: GlimpseModel,
    offset_ids: Optional[Sequence[int]] = None,
    J: int = 2,
    allow_repeats: bool = False,
    max_designs: int = 10 ** 6,
) -> List[DesignScore]:
    """Score every unordered J-subset of the candidates; best first, ties broken by offset ids."""
    if J < 1:
        raise ContractViolation(f"J must be at least 1, got {J}")
    ids = _candidates(model, offset_ids)
    count = math.comb(len(ids) + J - 1, J) if allow_repeats else math.comb(len(ids), J)
    if count > max_designs:
        raise DesignSearchError(
            f"exhaustive search over {count} designs exceeds the limit of {max_designs}; use search_greedy"
        )
    if count == 0:
        raise ContractViolation(f"cannot choose {J} distinct offsets from {len(ids)}")
    enumerate_ = combinations_with_replacement if allow_repeats else combinations
    designs = [Design(c) for c in enumerate_(ids, J)]
    logger.info("scoring %d designs of size %d over %d offsets", len(designs), J, len(ids))
    return _ranked(ordered_map(lambda d: score_design(model, d), designs))


def search_greedy(
    model: GlimpseModel,
    offset_ids: Optional[Sequence[int]] = None,
    J: int = 2,
    allow_repeats: bool = False,
) -> DesignScore:
    """Add, one at a time, the offset with the largest gain given those already chosen."""
    if J < 1:
        raise ContractViolation(f"J must be at least 1, got {J}")
    ids = _candidates(model, offset_ids)
    if not allow_repeats and J > len(ids):
        raise ContractViolation(f"cannot choose {J} distinct offsets from {len(ids)}")
    chosen: List[int] = []
    best: Optional[DesignScore] = None
    for _ in range(J):
        pool = [a for a in ids if allow_repeats or a not in chosen]
        scores = ordered_map(lambda a: score_design(model, Design(tuple(chosen) + (a,))), pool)
        best = _ranked(scores)[0]
        chosen = list(best.design.offset_ids)
        logger.debug("greedy step %d picked offset %d (%.4f nats)", len(chosen), chosen[-1], best.eig_nats)
    return best


def fixation_order(model: GlimpseModel, design: Design) -> Design:
    """
    The same offsets in the order a viewer should take them: each position
    holds the remaining offset that adds the most gain to those before it,
    so every prefix of the result is the best prefix of its length.
    """
    remaining = list(design.offset_ids)
    chosen: List[int] = []
    while len(set(remaining)) > 1:
        scores = [score_design(model, Design(tuple(chosen) + (a,))) for a in sorted(set(remaining))]
        pick = _ranked(scores)[0].design.offset_ids[-1]
        chosen.append(pick)
        remaining.remove(pick)
    return Design(tuple(chosen + remaining))


def random_design(
    offset_ids: Sequence[int], J: int, seed: Union[int, np.random.Generator] = 0
) -> Design:
    """J distinct offsets drawn uniformly without replacement."""
    ids = list(offset_ids)
    if J > len(ids):
        raise ContractViolation(f"cannot draw {J} distinct offsets from {len(ids)}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return Design(tuple(int(ids[i]) for i in rng.choice(len(ids), size=J, replace=False)))
