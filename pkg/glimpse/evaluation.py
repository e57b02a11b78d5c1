"""
Reconstruction metrics, paired sign tests, and posterior-entropy censuses
for comparing fixation designs on a test set.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import binom

from .data_io import write_pgm
from .design import Design, fixation_order, random_design
from .exceptions import ContractViolation
from .models import GlimpseModel
from .parallel import ordered_map
from .retina import upsample

logger = logging.getLogger(__name__)

FULL = "FA"
BED = "BED"
RANDOM = "random"
DEFAULT_THRESHOLD_BITS = 0.0808


def rmse(x_hat, x) -> float:
    x_hat = np.asarray(x_hat, dtype=np.float64).ravel()
    x = np.asarray(x, dtype=np.float64).ravel()
    if x_hat.shape != x.shape:
        raise ContractViolation(f"cannot compare images of {x_hat.size} and {x.size} pixels")
    return float(np.sqrt(np.mean((x_hat - x) ** 2)))


@dataclass(frozen=True)
class SignTestResult:
    """`p_value` is the one-sided exact binomial tail P(wins or more | fair coin)."""

    wins: int
    losses: int
    ties: int
    p_value: float
    p_two_sided: float
    log10_p: float

    @property
    def n_effective(self) -> int:
        return self.wins + self.losses

    @property
    def defined(self) -> bool:
        return self.n_effective > 0


def paired_sign_test(err_a, err_b) -> SignTestResult:
    """Counts images where A beats B; ties are dropped before the binomial tail."""
    err_a = np.asarray(err_a, dtype=np.float64)
    err_b = np.asarray(err_b, dtype=np.float64)
    if err_a.shape != err_b.shape:
        raise ContractViolation(f"paired errors differ in length: {err_a.size} vs {err_b.size}")
    wins = int(np.sum(err_a < err_b))
    losses = int(np.sum(err_a > err_b))
    ties = err_a.size - wins - losses
    n = wins + losses
    if n == 0:
        logger.warning("sign test has no untied pairs; p-value undefined")
        return SignTestResult(wins, losses, ties, float("nan"), float("nan"), float("nan"))
    log_upper = float(binom.logsf(wins - 1, n, 0.5))
    log_lower = float(binom.logcdf(wins, n, 0.5))
    two_sided = min(1.0, 2.0 * float(np.exp(min(log_upper, log_lower))))
    return SignTestResult(wins, losses, ties, float(np.exp(log_upper)), two_sided, log_upper / np.log(10.0))


def _glimpses(model: GlimpseModel, x: np.ndarray, offset_ids: Sequence[int]) -> List[Tuple[int, np.ndarray]]:
    return [(a, model.glimpse(a, x)) for a in offset_ids]


def _entropy_for(model: GlimpseModel, x: np.ndarray, offset_ids: Optional[Sequence[int]]) -> float:
    mp = model.infer_full(x) if offset_ids is None else model.infer(_glimpses(model, x, offset_ids))
    return mp.entropy_bits()


def entropy_census(
    model: GlimpseModel,
    images,
    designs: Mapping[str, Optional[Sequence[int]]],
    threshold_bits: float = DEFAULT_THRESHOLD_BITS,
) -> Dict[str, int]:
    """
    For each named design (None meaning the whole image) count the test
    points whose component posterior has entropy above `threshold_bits`.
    """
    X = np.asarray(getattr(images, "pixels", images), dtype=np.float64)
    census = {}
    for label, offset_ids in designs.items():
        entropies = ordered_map(lambda x: _entropy_for(model, x, offset_ids), list(X))
        census[label] = int(np.sum(np.asarray(entropies) > threshold_bits))
    return census


@dataclass
class EvalReport:
    """Per-image errors and entropies for every (design, fixation count) condition."""

    records: pd.DataFrame
    bed_design: Design
    sign_tests: Dict[int, SignTestResult] = field(default_factory=dict)
    threshold_bits: float = DEFAULT_THRESHOLD_BITS

    def table(self) -> pd.DataFrame:
        """Mean RMSE with one row per design and one column per fixation count."""
        frame = self.records.pivot_table(index="design", columns="fixations", values="rmse", aggfunc="mean")
        frame = frame.reindex(index=[d for d in (BED, RANDOM) if d in frame.index])
        frame.columns = [str(c) for c in frame.columns]
        return frame.reset_index()

    def census(self) -> pd.DataFrame:
        above = self.records.assign(above=self.records["entropy_bits"] > self.threshold_bits)
        return above.groupby(["design", "fixations"], sort=False)["above"].sum().astype(int).reset_index()

    def sign_test_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "fixations": k,
                    "bed_wins": r.wins,
                    "n_effective": r.n_effective,
                    "ties": r.ties,
                    "p_one_sided": r.p_value,
                    "p_two_sided": r.p_two_sided,
                    "log10_p": r.log10_p,
                }
                for k, r in sorted(self.sign_tests.items())
            ]
        )

    def rmse(self, design: str, fixations: Union[int, str]) -> float:
        rows = self.records[(self.records["design"] == design) & (self.records["fixations"] == str(fixations))]
        return float(rows["rmse"].mean())


def _evaluate_image(model, x, bed_ids, random_ids, counts, include_full):
    rows = []
    for label, ids in ((BED, bed_ids), (RANDOM, random_ids)):
        if ids is None:
            continue
        glimpses = _glimpses(model, x, ids)
        for k in counts:
            mp = model.infer(glimpses[:k])
            x_hat, _ = model.reconstruct(mp)
            rows.append((label, str(k), rmse(x_hat, x), mp.entropy_bits()))
    if include_full:
        mp = model.infer_full(x)
        x_hat, _ = model.reconstruct(mp)
        error, entropy = rmse(x_hat, x), mp.entropy_bits()
        labels = (BED, RANDOM) if random_ids is not None else (BED,)
        rows.extend((label, FULL, error, entropy) for label in labels)
    return rows


def run_protocol(
    model: GlimpseModel,
    bed_design: Design,
    images,
    seed=0,
    fixation_counts: Sequence[int] = (0, 1, 2),
    include_random: bool = True,
    include_full: bool = True,
    threshold_bits: float = DEFAULT_THRESHOLD_BITS,
    order_fixations: bool = True,
) -> EvalReport:
    """
    Reconstruct every test image from the first k fixations of the BED
    design and of a fresh random design per image, plus from the whole
    image, and score each reconstruction. With `order_fixations` the BED
    offsets are first put in greedy gain order, so k fixations use the best
    k-prefix rather than the first k offset ids.
    """
    X = np.asarray(getattr(images, "pixels", images), dtype=np.float64)
    counts = sorted(set(int(k) for k in fixation_counts))
    J = max(counts)
    if counts[0] < 0 or J > bed_design.J:
        raise ContractViolation(f"fixation counts {counts} need a design of at least {J} offsets")
    if order_fixations:
        bed_design = fixation_order(model, bed_design)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    random_designs = [
        random_design(range(model.n_offsets), J, rng).offset_ids if include_random and J else None
        for _ in range(X.shape[0])
    ]
    for m in range(model.n_components):
        for a in range(model.n_offsets):
            model.projection(m, a).precision_increment
        if include_full:
            model.full_projection(m).precision_increment
    logger.info("evaluating %d images over fixation counts %s", X.shape[0], counts)
    per_image = ordered_map(
        lambda i: _evaluate_image(model, X[i], bed_design.offset_ids, random_designs[i], counts, include_full),
        range(X.shape[0]),
    )
    records = pd.DataFrame(
        [(i, *row) for i, rows in enumerate(per_image) for row in rows],
        columns=["image", "design", "fixations", "rmse", "entropy_bits"],
    )
    report = EvalReport(records, bed_design, threshold_bits=threshold_bits)
    if include_random:
        for k in counts:
            if k == 0:
                continue
            bed = records[(records["design"] == BED) & (records["fixations"] == str(k))]["rmse"].to_numpy()
            rnd = records[(records["design"] == RANDOM) & (records["fixations"] == str(k))]["rmse"].to_numpy()
            report.sign_tests[k] = paired_sign_test(bed, rnd)
    return report


def render_panels(
    model: GlimpseModel,
    x,
    offset_ids: Sequence[int],
    out_dir: Union[str, Path],
    prefix: str = "image",
) -> List[Path]:
    """
    PGM panels for one image: the original, then after each fixation the
    pixels seen so far, the reconstruction and the posterior variance.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    out_dir = Path(out_dir)
    shape = model.image_shape
    paths = [write_pgm(x, out_dir / f"{prefix}_original.pgm", shape)]
    seen = np.zeros(x.size)
    missing = np.ones(x.size, dtype=bool)
    glimpses = _glimpses(model, x, offset_ids)
    variances = []
    for k in range(len(glimpses) + 1):
        x_hat, var = model.reconstruct(model.infer(glimpses[:k]))
        variances.append(var)
        if k:
            a, y = glimpses[k - 1]
            image, not_covered = upsample(model.placements[a], y)
            seen[~not_covered] = image[~not_covered]
            missing &= not_covered
            paths.append(write_pgm(seen, out_dir / f"{prefix}_glimpse{k}.pgm", shape, missing=missing))
        paths.append(write_pgm(x_hat, out_dir / f"{prefix}_recon{k}.pgm", shape))
    top = max(float(np.max(v)) for v in variances)
    for k, var in enumerate(variances):
        paths.append(write_pgm(var, out_dir / f"{prefix}_variance{k}.pgm", shape, value_range=(0.0, top)))
    return paths
