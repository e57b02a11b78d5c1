"""
Run configuration: pydantic models for every pipeline stage plus the seeded
random substreams all stochastic steps draw from.
"""

import json
import logging
from pathlib import Path
from typing import List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .exceptions import ConfigError
from .retina import Offset, RetinaSpec, enumerate_offsets

logger = logging.getLogger(__name__)

STREAMS = ("sampling", "kmeans", "random_design", "protocol")

MNIST_OFFSETS = [-4, 0, 4, 8, 12, 16]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class OptimizerConfig(_Strict):
    """Conjugate-gradient ascent settings. `grad_tol` is per record."""

    max_iter: int = Field(500, ge=1)
    grad_tol: float = Field(1e-5, gt=0)
    rel_tol: float = Field(1e-9, gt=0)
    c1: float = Field(1e-4, gt=0, lt=1)
    c2: float = Field(0.1, gt=0, lt=1)
    line_search_iter: int = Field(20, ge=1)
    restarts: int = Field(5, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_wolfe(self):
        if self.c1 >= self.c2:
            raise ValueError(f"line search needs c1 < c2, got c1={self.c1}, c2={self.c2}")
        return self


class SamplingConfig(_Strict):
    protocol: Literal["uniform", "stratified"] = "stratified"
    n: int = Field(100, ge=1)
    per_image: int = Field(1, ge=1)


class DataConfig(_Strict):
    train: Path
    test: Optional[Path] = None


class FitConfig(_Strict):
    kind: Literal["ppca", "fa", "mofa"] = "fa"
    K: int = Field(43, ge=1)
    M: int = Field(1, ge=1)
    em_iters: int = Field(500, ge=1)
    em_tol: float = Field(1e-6, gt=0)
    tune_psi_y: bool = True


class LearnConfig(_Strict):
    sampling: SamplingConfig = Field(default_factory=SamplingConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    fix_w: bool = False
    learn_mean: bool = False
    init_iters: int = Field(100, ge=1)
    init_model: Optional[Path] = None


class DesignConfig(_Strict):
    mode: Literal["exhaustive", "greedy", "random"] = "exhaustive"
    J: int = Field(2, ge=1)
    allow_repeats: bool = False
    max_designs: int = Field(10 ** 6, ge=1)


class EvalConfig(_Strict):
    threshold_bits: float = Field(0.0808, ge=0)
    panels: List[int] = []


class RunConfig(_Strict):
    data: DataConfig
    retina: RetinaSpec = Field(default_factory=RetinaSpec)
    row_offsets: List[int] = Field(default_factory=lambda: list(MNIST_OFFSETS), min_length=1)
    col_offsets: List[int] = Field(default_factory=lambda: list(MNIST_OFFSETS), min_length=1)
    fit: FitConfig = Field(default_factory=FitConfig)
    learn: LearnConfig = Field(default_factory=LearnConfig)
    design: DesignConfig = Field(default_factory=DesignConfig)
    evaluate: EvalConfig = Field(default_factory=EvalConfig)
    seed: int = 0
    output_dir: Path = Path("runs")

    def offsets(self) -> List[Offset]:
        return enumerate_offsets(self.row_offsets, self.col_offsets)

    def rng(self, stream: str) -> np.random.Generator:
        return rng(self.seed, stream)

    def stream_seed(self, stream: str) -> int:
        return stream_seed(self.seed, stream)


def _seed_sequence(seed: int, stream: str) -> np.random.SeedSequence:
    if stream not in STREAMS:
        raise ConfigError(f"unknown random stream {stream!r}; expected one of {STREAMS}", key=stream)
    return np.random.SeedSequence([int(seed), STREAMS.index(stream)])


def rng(seed: int, stream: str) -> np.random.Generator:
    """Independent generator for one named stream of a run seed."""
    return np.random.default_rng(_seed_sequence(seed, stream))


def stream_seed(seed: int, stream: str) -> int:
    """Integer seed for libraries that take one (scikit-learn)."""
    return int(_seed_sequence(seed, stream).generate_state(1)[0])


def _validation_to_config_error(exc: ValidationError) -> ConfigError:
    first = exc.errors()[0]
    key = ".".join(str(part) for part in first["loc"])
    return ConfigError(f"invalid config key {key!r}: {first['msg']}", key=key)


def parse_run_config(document: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(document)
    except ValidationError as exc:
        raise _validation_to_config_error(exc) from exc


def load_run_config(path: Union[str, Path]) -> RunConfig:
    """Read and validate a JSON run configuration before any work starts."""
    path = Path(path)
    try:
        document = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(document, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    config = parse_run_config(document)
    logger.debug("loaded run config from %s", path)
    return config
