"""
Foveated glimpse models: retinal transforms, factor-analysis inference over
variable-resolution glimpses, fixation design by expected information gain,
and learning directly from glimpse data.
"""

from .config import RunConfig, load_run_config
from .data_io import ImageSet, find_mnist, load_images, normalize, read_glim, read_idx, split, write_glim
from .design import (
    Design,
    DesignScore,
    ScoreKind,
    eig_fa,
    eig_mofa_upper,
    eig_monte_carlo,
    fixation_order,
    random_design,
    score_design,
    search_exhaustive,
    search_greedy,
)
from .evaluation import EvalReport, entropy_census, paired_sign_test, render_panels, rmse, run_protocol
from .exceptions import (
    ChecksumError,
    ConfigError,
    ContractViolation,
    DataFormatError,
    DegenerateNoiseError,
    DesignSearchError,
    GlimpseError,
    LayoutError,
    NotPositiveDefiniteError,
    NumericalError,
)
from .fusion import Glimpse, GlimpseSequence, fused_mixture_posterior, fused_posterior, lds_filter, stack
from .learning import (
    GlimpseDataset,
    LearnState,
    grad_mixture,
    grad_psi,
    grad_W,
    init_from_glimpses,
    loglik,
    optimize,
    sample_glimpse_dataset,
)
from .models import (
    FAModel,
    GlimpseModel,
    MixturePosterior,
    MoFAModel,
    Posterior,
    ProjectedFA,
    fit_fa_em,
    fit_mofa_x,
    fit_ppca,
    posterior,
    project,
    reconstruct,
    responsibilities,
)
from .retina import Offset, RetinaPlacements, RetinaSpec, RetinalTransform, apply, build_layout, place, upsample

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "load_run_config",
    "ImageSet",
    "find_mnist",
    "load_images",
    "normalize",
    "read_glim",
    "read_idx",
    "split",
    "write_glim",
    "Design",
    "DesignScore",
    "ScoreKind",
    "eig_fa",
    "eig_mofa_upper",
    "eig_monte_carlo",
    "fixation_order",
    "random_design",
    "score_design",
    "search_exhaustive",
    "search_greedy",
    "EvalReport",
    "entropy_census",
    "paired_sign_test",
    "render_panels",
    "rmse",
    "run_protocol",
    "ChecksumError",
    "ConfigError",
    "ContractViolation",
    "DataFormatError",
    "DegenerateNoiseError",
    "DesignSearchError",
    "GlimpseError",
    "LayoutError",
    "NotPositiveDefiniteError",
    "NumericalError",
    "Glimpse",
    "GlimpseSequence",
    "fused_mixture_posterior",
    "fused_posterior",
    "lds_filter",
    "stack",
    "GlimpseDataset",
    "LearnState",
    "grad_mixture",
    "grad_psi",
    "grad_W",
    "init_from_glimpses",
    "loglik",
    "optimize",
    "sample_glimpse_dataset",
    "FAModel",
    "GlimpseModel",
    "MixturePosterior",
    "MoFAModel",
    "Posterior",
    "ProjectedFA",
    "fit_fa_em",
    "fit_mofa_x",
    "fit_ppca",
    "posterior",
    "project",
    "reconstruct",
    "responsibilities",
    "Offset",
    "RetinaPlacements",
    "RetinaSpec",
    "RetinalTransform",
    "apply",
    "build_layout",
    "place",
    "upsample",
]
