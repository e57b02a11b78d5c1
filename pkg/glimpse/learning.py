"""
Maximum-likelihood learning of FA and MoFA parameters directly from glimpses.

Each record i is a glimpse y^i taken at offset l(i). Under component m it is
distributed N(V mu^m, V W^m (V W^m)^T + diag(psi^m_l(i))), where every
(component, offset) pair owns its own glimpse noise, parameterized as
psi = exp(t). The likelihood of a record set is maximized by nonlinear
conjugate-gradient ascent over the packed vector of (W, t) and, for
mixtures, the mixing logits.

Gradients of one record under one component, with M = W_a W_a^T + Psi,
s = M^-1 (y - mu_a):

    dL/dW_a = s s^T W_a - M^-1 W_a        (then dL/dW = V^T dL/dW_a)
    dL/dpsi = 1/2 s**2 - 1/2 diag(M^-1)   (then dL/dt = psi * dL/dpsi)
    dL/dmu_a = s

Mixture records weight these by their responsibilities; the logit of
component m moves by sum_i (r_im - pi_m).
"""

import logging
import warnings
from collections import OrderedDict
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import line_search
from scipy.special import logsumexp as _logsumexp
from scipy.special import softmax

from .config import OptimizerConfig
from .exceptions import ContractViolation, NumericalError
from .models import FAModel, GlimpseModel, MoFAModel, fit_ppca, psi_y_init
from .numerics import LOG_2PI, LowRankCovariance, SpdFactor
from .parallel import ordered_map
from .retina import Offset, RetinaPlacements, RetinaSpec, apply, upsample

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["iteration", "loglik", "grad_norm", "step_size"]
SIGMA2_FLOOR = 1e-10


class Batch(NamedTuple):
    """Records sharing one tuple of offsets; each row of Y is one stacked observation."""

    offset_ids: Tuple[int, ...]
    Y: np.ndarray


@dataclass(frozen=True, eq=False)
class GlimpseDataset:
    """
    Glimpses tied to one retina layout and offset table. With `grouped`,
    records sharing an image id form one joint observation (several
    placements of the same image); otherwise every record stands alone.
    """

    retina: RetinaSpec
    image_shape: Tuple[int, int]
    offsets: Tuple[Offset, ...]
    offset_ids: np.ndarray
    glimpses: Tuple[np.ndarray, ...]
    image_ids: Optional[np.ndarray] = None
    grouped: bool = False

    def __post_init__(self):
        object.__setattr__(self, "image_shape", (int(self.image_shape[0]), int(self.image_shape[1])))
        object.__setattr__(self, "offsets", tuple(Offset(int(o[0]), int(o[1])) for o in self.offsets))
        ids = np.asarray(self.offset_ids, dtype=np.int64).reshape(-1)
        glimpses = tuple(np.asarray(g, dtype=np.float64) for g in self.glimpses)
        image_ids = np.full(ids.shape[0], -1, dtype=np.int64) if self.image_ids is None else np.asarray(
            self.image_ids, dtype=np.int64
        )
        if len(glimpses) != ids.shape[0] or image_ids.shape != ids.shape:
            raise ContractViolation(
                f"{ids.shape[0]} offset ids, {len(glimpses)} glimpses and {image_ids.shape[0]} image ids disagree"
            )
        if ids.size and (ids.min() < 0 or ids.max() >= len(self.offsets)):
            raise ContractViolation(f"offset ids must index the table of {len(self.offsets)} offsets")
        counts = self.placements.active_counts() if ids.size else None
        for i, (a, g) in enumerate(zip(ids, glimpses)):
            if g.shape != (counts[a],):
                raise ContractViolation(f"record {i} has {g.size} values, offset {a} has {counts[a]} active cells")
        if self.grouped and ids.size and np.any(image_ids < 0):
            raise ContractViolation("grouped records need an image id for every record")
        object.__setattr__(self, "offset_ids", ids)
        object.__setattr__(self, "glimpses", glimpses)
        object.__setattr__(self, "image_ids", image_ids)

    @cached_property
    def placements(self) -> RetinaPlacements:
        return RetinaPlacements(self.retina, self.image_shape, self.offsets)

    @property
    def n(self) -> int:
        return int(self.offset_ids.shape[0])

    def __len__(self) -> int:
        return self.n

    @property
    def D(self) -> int:
        return self.image_shape[0] * self.image_shape[1]

    def n_observations(self) -> int:
        """Independent terms of the likelihood: images when grouped, records otherwise."""
        return len(np.unique(self.image_ids)) if self.grouped else self.n

    def records_for(self, offset_id: int) -> np.ndarray:
        rows = np.flatnonzero(self.offset_ids == offset_id)
        return np.vstack([self.glimpses[i] for i in rows]) if rows.size else np.zeros((0, 0))

    def batches(self, grouped: Optional[bool] = None) -> List[Batch]:
        grouped = self.grouped if grouped is None else grouped
        key = "grouped" if grouped else "independent"
        cache = self.__dict__.setdefault("_batches", {})
        if key not in cache:
            cache[key] = self._build_batches(grouped)
        return cache[key]

    def _build_batches(self, grouped: bool) -> List[Batch]:
        rows: "OrderedDict[Tuple[int, ...], list]" = OrderedDict()
        if grouped:
            members: "OrderedDict[int, list]" = OrderedDict()
            for i, image in enumerate(self.image_ids):
                members.setdefault(int(image), []).append(i)
            for records in members.values():
                key = tuple(int(self.offset_ids[i]) for i in records)
                rows.setdefault(key, []).append(np.concatenate([self.glimpses[i] for i in records]))
        else:
            for a in sorted(set(self.offset_ids.tolist())):
                rows[(a,)] = [self.glimpses[i] for i in np.flatnonzero(self.offset_ids == a)]
        return [Batch(key, np.vstack(values)) for key, values in rows.items()]


@dataclass
class LearnState:
    """
    Learnable parameters of an M-component model. `t[m][a]` holds the log
    glimpse noise of component m at offset a; `psi_x` is carried along so
    the state can be turned back into an x-space model.
    """

    mu: np.ndarray
    W: np.ndarray
    t: List[List[np.ndarray]]
    logit_pi: np.ndarray
    psi_x: np.ndarray

    def __post_init__(self):
        self.mu = np.atleast_2d(np.asarray(self.mu, dtype=np.float64))
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.W.ndim == 2:
            self.W = self.W[None]
        self.psi_x = np.atleast_2d(np.asarray(self.psi_x, dtype=np.float64))
        self.logit_pi = np.asarray(self.logit_pi, dtype=np.float64).reshape(-1)
        self.t = [[np.asarray(v, dtype=np.float64) for v in row] for row in self.t]
        M, D, _ = self.W.shape
        if self.mu.shape != (M, D) or self.psi_x.shape != (M, D) or self.logit_pi.shape != (M,) or len(self.t) != M:
            raise ContractViolation("learn state blocks disagree on M or D")
        if len({len(row) for row in self.t}) != 1:
            raise ContractViolation("every component needs a noise vector per offset")

    @property
    def M(self) -> int:
        return self.W.shape[0]

    @property
    def D(self) -> int:
        return self.W.shape[1]

    @property
    def K(self) -> int:
        return self.W.shape[2]

    @property
    def n_offsets(self) -> int:
        return len(self.t[0])

    def pi(self) -> np.ndarray:
        return softmax(self.logit_pi)

    def log_pi(self) -> np.ndarray:
        return self.logit_pi - _logsumexp(self.logit_pi)

    def psi(self, m: int, a: int) -> np.ndarray:
        return np.exp(self.t[m][a])

    def copy(self) -> "LearnState":
        return LearnState(
            self.mu.copy(), self.W.copy(), [[v.copy() for v in row] for row in self.t], self.logit_pi.copy(),
            self.psi_x.copy(),
        )

    @classmethod
    def from_glimpse_model(cls, model: GlimpseModel) -> "LearnState":
        components = model.mixture.components
        K = model.mixture.K
        W = np.stack([np.hstack([fa.W, np.zeros((fa.D, K - fa.K))]) for fa in components])
        with np.errstate(divide="ignore"):
            logit = np.maximum(np.log(model.mixture.pi), np.log(np.finfo(float).tiny))
        return cls(
            mu=np.stack([fa.mu for fa in components]),
            W=W,
            t=[[np.log(p) for p in row] for row in model.psi_y],
            logit_pi=logit,
            psi_x=np.stack([fa.psi for fa in components]),
        )

    def to_glimpse_model(self, retina: RetinaSpec, image_shape, offsets, metadata=None) -> GlimpseModel:
        pi = self.pi()
        mixture = MoFAModel(
            tuple(FAModel(self.mu[m], self.W[m], self.psi_x[m]) for m in range(self.M)), pi / pi.sum()
        )
        psi_y = tuple(tuple(self.psi(m, a) for a in range(self.n_offsets)) for m in range(self.M))
        return GlimpseModel(mixture, retina, image_shape, offsets, psi_y, dict(metadata or {}))


@dataclass
class MixtureGradient:
    W: np.ndarray
    t: List[List[np.ndarray]]
    logit_pi: np.ndarray
    mu: np.ndarray


class _Projected(NamedTuple):
    mu: List[List[np.ndarray]]
    W: List[List[np.ndarray]]


def _project_state(state: LearnState, data: GlimpseDataset, offset_ids) -> _Projected:
    placements = data.placements
    mu = [[None] * len(placements) for _ in range(state.M)]
    W = [[None] * len(placements) for _ in range(state.M)]
    for a in offset_ids:
        V = placements[a].matrix
        for m in range(state.M):
            mu[m][a] = V @ state.mu[m]
            W[m][a] = np.asarray(V @ state.W[m])
    return _Projected(mu, W)


def _check(state: LearnState, data: GlimpseDataset) -> None:
    if data.n == 0:
        raise ContractViolation("likelihood needs at least one record")
    if state.D != data.D or state.n_offsets != len(data.offsets):
        raise ContractViolation(
            f"state (D={state.D}, {state.n_offsets} offsets) does not match data "
            f"(D={data.D}, {len(data.offsets)} offsets)"
        )


def _batch_terms(state: LearnState, proj: _Projected, batch: Batch, need_grad: bool):
    ids, Y = batch.offset_ids, batch.Y
    offset_label = ids[0] if len(ids) == 1 else ids
    log_pi = state.log_pi()
    log_joint = np.empty((Y.shape[0], state.M))
    parts = []
    for m in range(state.M):
        mu_b = np.concatenate([proj.mu[m][a] for a in ids])
        W_b = np.vstack([proj.W[m][a] for a in ids])
        psi_b = np.concatenate([state.psi(m, a) for a in ids])
        cov = LowRankCovariance(W_b, psi_b, offset_id=offset_label)
        centered = Y - mu_b
        S = cov.solve(centered.T).T
        log_joint[:, m] = log_pi[m] - 0.5 * (np.sum(centered * S, axis=1) + cov.logdet() + Y.shape[1] * LOG_2PI)
        parts.append((cov, S, W_b, psi_b))
    norm = _logsumexp(log_joint, axis=1)
    total = float(norm.sum())
    if not need_grad:
        return total, None
    r = np.exp(log_joint - norm[:, None])
    pieces = []
    for m, (cov, S, W_b, psi_b) in enumerate(parts):
        weight = r[:, m]
        mass = weight.sum()
        Minv_W = cov.capacitance.solve(cov.scaled_loadings.T).T
        g_W = S.T @ (weight[:, None] * (S @ W_b)) - mass * Minv_W
        g_psi = 0.5 * (weight @ S ** 2) - 0.5 * mass * cov.inverse_diagonal()
        pieces.append((g_W, g_psi * psi_b, weight @ S))
    return total, (pieces, (r - np.exp(log_pi)).sum(axis=0))


def _evaluate(state: LearnState, data: GlimpseDataset, need_grad: bool):
    _check(state, data)
    batches = data.batches()
    used = sorted({a for b in batches for a in b.offset_ids})
    proj = _project_state(state, data, used)
    results = ordered_map(lambda b: _batch_terms(state, proj, b, need_grad), batches)
    total = float(sum(value for value, _ in results))
    if not need_grad:
        return total, None
    grad = MixtureGradient(
        W=np.zeros_like(state.W),
        t=[[np.zeros_like(v) for v in row] for row in state.t],
        logit_pi=np.zeros(state.M),
        mu=np.zeros_like(state.mu),
    )
    placements = data.placements
    for batch, (_, (pieces, g_logit)) in zip(batches, results):
        grad.logit_pi += g_logit
        bounds = np.cumsum([0] + [placements[a].n_active for a in batch.offset_ids])
        for m, (g_W, g_t, g_mu) in enumerate(pieces):
            for a, lo, hi in zip(batch.offset_ids, bounds[:-1], bounds[1:]):
                V_T = placements[a].matrix.T
                grad.W[m] += np.asarray(V_T @ g_W[lo:hi])
                grad.t[m][a] += g_t[lo:hi]
                grad.mu[m] += V_T @ g_mu[lo:hi]
    return total, grad


def loglik(state: LearnState, data: GlimpseDataset) -> float:
    """Total glimpse log-likelihood in nats, normalizing constant included."""
    return _evaluate(state, data, need_grad=False)[0]


def grad_mixture(state: LearnState, data: GlimpseDataset) -> MixtureGradient:
    return _evaluate(state, data, need_grad=True)[1]


def _single(state: LearnState, what: str) -> None:
    if state.M != 1:
        raise ContractViolation(f"{what} is defined for a single FA model; use grad_mixture for M={state.M}")


def grad_W(state: LearnState, data: GlimpseDataset) -> np.ndarray:
    """dL/dW, D x K."""
    _single(state, "grad_W")
    return grad_mixture(state, data).W[0]


def grad_psi(state: LearnState, data: GlimpseDataset) -> List[np.ndarray]:
    """dL/dt per offset, where psi = exp(t); zero for offsets without records."""
    _single(state, "grad_psi")
    return grad_mixture(state, data).t[0]


def grad_mean(state: LearnState, data: GlimpseDataset) -> np.ndarray:
    _single(state, "grad_mean")
    return grad_mixture(state, data).mu[0]


BLOCKS = ("W", "t", "pi", "mu")


def _default_blocks(state: LearnState, fix_W: bool, learn_mean: bool) -> Tuple[str, ...]:
    blocks = ["t"] if fix_W else ["W", "t"]
    if state.M > 1 and not fix_W:
        blocks.append("pi")
    if learn_mean:
        blocks.append("mu")
    return tuple(blocks)


def pack(state, blocks: Sequence[str]) -> np.ndarray:
    """Flatten the chosen blocks of a LearnState (or a MixtureGradient) in BLOCKS order."""
    parts = []
    for name in BLOCKS:
        if name not in blocks:
            continue
        if name == "W":
            parts.append(state.W.ravel())
        elif name == "t":
            parts.extend(v for row in state.t for v in row)
        elif name == "pi":
            parts.append(state.logit_pi)
        else:
            parts.append(state.mu.ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


def unpack(vector: np.ndarray, template: LearnState, blocks: Sequence[str]) -> LearnState:
    expected = pack(template, blocks).size
    if vector.size != expected:
        raise ContractViolation(f"parameter vector has {vector.size} entries, blocks need {expected}")
    state = template.copy()
    pos = 0
    for name in BLOCKS:
        if name not in blocks:
            continue
        if name == "W":
            state.W = vector[pos:pos + state.W.size].reshape(state.W.shape).copy()
            pos += state.W.size
        elif name == "t":
            for row in state.t:
                for a, v in enumerate(row):
                    row[a] = vector[pos:pos + v.size].copy()
                    pos += v.size
        elif name == "pi":
            state.logit_pi = vector[pos:pos + state.M].copy()
            pos += state.M
        else:
            state.mu = vector[pos:pos + state.mu.size].reshape(state.mu.shape).copy()
            pos += state.mu.size
    return state


class AscentResult(NamedTuple):
    x: np.ndarray
    value: float
    trace: pd.DataFrame
    status: str
    converged: bool


def _backtrack(evaluate, x, f, g, cfg: OptimizerConfig, halvings: int = 40):
    """Armijo backtracking along the gradient from a unit-length first step."""
    slope = float(g @ g)
    if not slope > 0.0:
        return None, -np.inf, g
    alpha = 1.0 / np.sqrt(slope)
    for _ in range(halvings):
        f_new, g_new = evaluate(x + alpha * g)
        if f_new >= f + cfg.c1 * alpha * slope and f_new > f:
            return alpha, f_new, g_new
        alpha /= 2.0
    return None, -np.inf, g


def maximize(
    fun_and_grad: Callable[[np.ndarray], Tuple[float, np.ndarray]],
    x0: np.ndarray,
    cfg: OptimizerConfig,
    grad_scale: float = 1.0,
) -> AscentResult:
    """
    Polak-Ribiere+ conjugate-gradient ascent with a strong-Wolfe line search.
    A failed line search restarts along the gradient; along the gradient a
    failed search falls back to shrinking steps, and only when those fail
    too, or after more than `cfg.restarts` restarts, does the run end.
    Accepted steps never lower the objective.
    """
    cache: Dict[bytes, Tuple[float, np.ndarray]] = {}

    def evaluate(x):
        key = x.tobytes()
        if key not in cache:
            try:
                value, grad = fun_and_grad(x)
            except NumericalError as exc:
                logger.debug("objective undefined at trial point: %s", exc)
                value, grad = -np.inf, np.zeros_like(x)
            cache.clear()
            cache[key] = (float(value), np.asarray(grad, dtype=np.float64))
        return cache[key]

    x = np.asarray(x0, dtype=np.float64).copy()
    f, g = evaluate(x)
    if not np.isfinite(f):
        raise NumericalError("initial log-likelihood is not finite")
    rows = [(0, f, float(np.linalg.norm(g)), 0.0)]
    d = g.copy()
    # A virtual previous value |g|/2 below f makes the first trial step about unit length.
    previous_f = f - np.linalg.norm(g) / 2
    restarts = 0
    status, converged = "max_iter", False
    for it in range(1, cfg.max_iter + 1):
        if np.linalg.norm(g) <= cfg.grad_tol * grad_scale:
            status, converged = "gradient_tolerance", True
            break
        with warnings.catch_warnings():
            # scipy warns (RuntimeWarning subclasses) when the search gives up
            warnings.simplefilter("ignore", RuntimeWarning)
            alpha, *_ = line_search(
                lambda z: -evaluate(z)[0],
                lambda z: -evaluate(z)[1],
                x,
                d,
                gfk=-g,
                old_fval=-f,
                old_old_fval=-previous_f,
                c1=cfg.c1,
                c2=cfg.c2,
                maxiter=cfg.line_search_iter,
            )
        x_new = None if alpha is None else x + alpha * d
        f_new, g_new = evaluate(x_new) if x_new is not None else (-np.inf, g)
        if alpha is None or not f_new >= f:
            if not np.array_equal(d, g):
                restarts += 1
                if restarts > cfg.restarts:
                    status = "line_search_failed"
                    logger.warning("line search failed at iteration %d after %d restarts", it, cfg.restarts)
                    break
                logger.warning("line search failed at iteration %d; restarting along the gradient", it)
                d = g.copy()
                previous_f = f - np.linalg.norm(g) / 2
                continue
            alpha, f_new, g_new = _backtrack(evaluate, x, f, g, cfg)
            if alpha is None:
                status = "line_search_failed"
                logger.warning("no ascent step along the gradient at iteration %d; keeping the best state", it)
                break
            logger.debug("backtracking step %.3g accepted at iteration %d", alpha, it)
            x_new = x + alpha * d
        step = float(alpha * np.linalg.norm(d))
        beta = max(0.0, float(g_new @ (g_new - g)) / float(g @ g))
        d = g_new + beta * d
        if d @ g_new <= 0.01 * (g_new @ g_new):
            d = g_new.copy()
        rows.append((it, f_new, float(np.linalg.norm(g_new)), step))
        improvement = f_new - f
        x, previous_f, f, g = x_new, f, f_new, g_new
        if improvement <= cfg.rel_tol * max(abs(f), 1.0):
            status, converged = "relative_tolerance", True
            break
    trace = pd.DataFrame(rows, columns=TRACE_COLUMNS)
    return AscentResult(x, f, trace, status, converged)


def optimize(
    state: LearnState,
    data: GlimpseDataset,
    cfg: Optional[OptimizerConfig] = None,
    fix_W: bool = False,
    learn_mean: bool = False,
    blocks: Optional[Sequence[str]] = None,
) -> Tuple[LearnState, pd.DataFrame]:
    """
    Conjugate-gradient ascent of the glimpse log-likelihood. With `fix_W`
    only the noise parameters move. Returns the final state and a trace of
    (iteration, loglik, grad_norm, step_size).
    """
    cfg = cfg or OptimizerConfig()
    blocks = tuple(blocks) if blocks is not None else _default_blocks(state, fix_W, learn_mean)
    unknown = set(blocks) - set(BLOCKS)
    if unknown:
        raise ContractViolation(f"unknown parameter blocks {sorted(unknown)}")

    def fun_and_grad(x):
        value, grad = _evaluate(unpack(x, state, blocks), data, need_grad=True)
        return value, pack(grad, blocks)

    result = maximize(fun_and_grad, pack(state, blocks), cfg, grad_scale=data.n_observations())
    logger.info(
        "optimization finished (%s) after %d accepted steps: LL %.4f -> %.4f",
        result.status,
        len(result.trace) - 1,
        result.trace["loglik"].iloc[0],
        result.value,
    )
    result.trace.attrs.update(status=result.status, seed=cfg.seed, blocks=",".join(blocks), units="nats")
    return unpack(result.x, state, blocks), result.trace


def sample_glimpse_dataset(
    images,
    placements: RetinaPlacements,
    n: int,
    seed=0,
    protocol: str = "uniform",
    per_image: int = 1,
) -> GlimpseDataset:
    """
    Draw glimpses from an image set. "uniform" draws n (image, offset)
    pairs (or n images with `per_image` distinct offsets each, grouped);
    "stratified" takes n random images at every offset.
    """
    X = np.asarray(getattr(images, "pixels", images), dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != placements.image_shape[0] * placements.image_shape[1]:
        raise ContractViolation(f"images of shape {X.shape} do not match placements for {placements.image_shape}")
    if n < 1:
        raise ContractViolation(f"n must be at least 1, got {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    A = len(placements)
    if protocol == "stratified":
        offset_ids = np.repeat(np.arange(A), n)
        image_ids = np.concatenate([rng.choice(X.shape[0], size=n, replace=n > X.shape[0]) for _ in range(A)])
    elif protocol == "uniform":
        if per_image > A:
            raise ContractViolation(f"cannot take {per_image} distinct offsets from {A}")
        if per_image > 1:
            if n > X.shape[0]:
                logger.warning("%d groups from %d images; repeated images merge into one group", n, X.shape[0])
            draws = rng.choice(X.shape[0], size=n, replace=n > X.shape[0])
        else:
            draws = rng.integers(X.shape[0], size=n)
        image_ids = np.repeat(draws, per_image)
        offset_ids = np.concatenate([rng.choice(A, size=per_image, replace=False) for _ in range(n)])
    else:
        raise ContractViolation(f"unknown sampling protocol {protocol!r}")
    glimpses = tuple(apply(placements[a], X[i]) for a, i in zip(offset_ids, image_ids))
    return GlimpseDataset(
        placements.spec, placements.image_shape, placements.offsets, offset_ids, glimpses, image_ids,
        grouped=protocol == "uniform" and per_image > 1,
    )


def upsample_glimpses(data: GlimpseDataset) -> Tuple[np.ndarray, float]:
    """Crude n x D image matrix (NaN where no cell covers a pixel) and its missing fraction."""
    X = np.full((data.n, data.D), np.nan)
    for i, (a, y) in enumerate(zip(data.offset_ids, data.glimpses)):
        image, missing = upsample(data.placements[a], y)
        X[i, ~missing] = image[~missing]
    return X, float(np.isnan(X).mean()) if X.size else 0.0


def _missing_ppca_loglik(mu, W, sigma2, groups) -> float:
    total = 0.0
    for observed, X_a in groups:
        cov = LowRankCovariance(W[observed], np.full(observed.size, sigma2))
        centered = X_a[:, observed] - mu[observed]
        quad = np.sum(centered * cov.solve(centered.T).T)
        total += -0.5 * quad - 0.5 * X_a.shape[0] * (cov.logdet() + observed.size * LOG_2PI)
    return float(total)


def init_from_glimpses(data: GlimpseDataset, K: int, iters: int = 100, tol: float = 1e-6) -> LearnState:
    """
    Starting point for glimpse learning: upsample every glimpse, fit PPCA
    to the resulting image matrix treating uncovered pixels as missing, and
    seed each offset's glimpse noise from the fitted isotropic variance.
    """
    if data.n == 0:
        raise ContractViolation("initialization needs at least one record")
    X, missing_fraction = upsample_glimpses(data)
    D = data.D
    observed_any = ~np.all(np.isnan(X), axis=0)
    never = np.flatnonzero(~observed_any)
    if never.size:
        logger.warning(
            "%d pixels are never observed and fall back to the global mean: %s", never.size, never.tolist()[:20]
        )
    logger.info("initializing from %d glimpses with %.1f%% of upsampled entries missing", data.n, 100 * missing_fraction)

    fill = np.where(observed_any, np.nanmean(np.where(observed_any, X, 0.0), axis=0), 0.0)
    global_mean = float(np.nanmean(X))
    fill[~observed_any] = global_mean
    start = fit_ppca(np.where(np.isnan(X), fill, X), K)
    mu, W, sigma2 = start.mu.copy(), start.W.copy(), float(start.psi[0])

    groups = []
    for a in sorted(set(data.offset_ids.tolist())):
        observed = np.flatnonzero(data.placements[a].covered)
        X_a = np.nan_to_num(X[data.offset_ids == a])
        groups.append((observed, X_a))
    coverage = np.zeros((len(groups), D))
    for g, (observed, _) in enumerate(groups):
        coverage[g, observed] = 1.0
    n_obs = float(sum(X_a.shape[0] * observed.size for observed, X_a in groups))
    sum_sq = float(sum(np.sum(X_a[:, observed] ** 2) for observed, X_a in groups))

    previous = _missing_ppca_loglik(mu, W, sigma2, groups)
    for it in range(iters):
        Wt = np.hstack([W, mu[:, None]])
        second = np.empty((len(groups), K + 1, K + 1))
        first = np.zeros((D, K + 1))
        latent = []
        for g, (observed, X_a) in enumerate(groups):
            W_o = W[observed]
            factor = SpdFactor.of(sigma2 * np.eye(K) + W_o.T @ W_o)
            Ez = factor.solve(W_o.T @ (X_a[:, observed] - mu[observed]).T).T
            Z = np.hstack([Ez, np.ones((Ez.shape[0], 1))])
            second[g] = Z.T @ Z
            second[g, :K, :K] += X_a.shape[0] * sigma2 * factor.inverse()
            first[observed] += X_a[:, observed].T @ Z
            latent.append(Z)
        A = np.einsum("gd,gkl->dkl", coverage, second)
        A[~observed_any] = np.eye(K + 1)
        Wt = np.linalg.solve(A, first[..., None])[..., 0]
        Wt[~observed_any] = 0.0
        Wt[~observed_any, K] = global_mean
        cross = sum(np.sum(X_a[:, observed] * (Z @ Wt[observed].T)) for (observed, X_a), Z in zip(groups, latent))
        quad = sum(np.sum((Wt[observed] @ second[g]) * Wt[observed]) for g, (observed, _) in enumerate(groups))
        sigma2 = max((sum_sq - 2.0 * cross + quad) / n_obs, SIGMA2_FLOOR)
        W, mu = Wt[:, :K], Wt[:, K]
        current = _missing_ppca_loglik(mu, W, sigma2, groups)
        if abs(current - previous) <= tol * abs(previous):
            logger.debug("missing-data PPCA converged after %d iterations", it + 1)
            break
        previous = current
    else:
        logger.warning("missing-data PPCA stopped after %d iterations without converging", iters)

    psi_x = np.full(D, sigma2)
    t = [[np.log(psi_y_init(rt, psi_x)) for rt in data.placements]]
    return LearnState(mu=mu[None], W=W[None], t=t, logit_pi=np.zeros(1), psi_x=psi_x[None])


def independent_baseline_loglik(data: GlimpseDataset) -> float:
    """
    Log-likelihood of the records under independent per-offset,
    per-dimension Gaussians fitted by maximum likelihood.
    """
    if data.n == 0:
        raise ContractViolation("baseline needs at least one record")
    total = 0.0
    for a in sorted(set(data.offset_ids.tolist())):
        Y = data.records_for(a)
        var = np.maximum(Y.var(axis=0), SIGMA2_FLOOR)
        total += -0.5 * Y.shape[0] * float(np.sum(np.log(var) + LOG_2PI + 1.0))
    return total
