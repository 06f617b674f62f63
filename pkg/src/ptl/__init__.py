"""Progressive transformation learning engine.

Models a training set's embedding distribution as a multivariate Gaussian,
scores virtual candidates by multi-scale Mahalanobis domain gap, selects
transformation candidates by temperature-weighted sampling without
replacement, and iteratively migrates transformed candidates from the
virtual pool into the real set through pluggable embedder/transformer
backends.
"""

from .errors import PtlError
from .gap import DEFAULT_SCALES, GapScore, MultiScaleFeatures, min_gap, score_pool
from .gaussian import (
    FeatureSet,
    FeatureVector,
    GaussianClassModel,
    LinearHead,
    PriorPair,
    fit_gaussian,
    gda_posterior,
    lda_linearize,
    mahalanobis_sq,
)
from .linalg import CholeskyFactor, SpdMatrix, cholesky_decompose, regularize_spd, solve_spd
from .loop import (
    PtlConfig,
    PtlState,
    SelectionManifest,
    load_state,
    run,
    run_iteration,
    save_state,
    set_update,
)
from .sampler import SamplerConfig, inclusion_probabilities, select_candidates, weight
from .synth import SyntheticWorld, WorldConfig, generate_world, run_synthetic

__version__ = "0.1.0"

__all__ = [
    "PtlError",
    "DEFAULT_SCALES",
    "GapScore",
    "MultiScaleFeatures",
    "min_gap",
    "score_pool",
    "FeatureSet",
    "FeatureVector",
    "GaussianClassModel",
    "LinearHead",
    "PriorPair",
    "fit_gaussian",
    "gda_posterior",
    "lda_linearize",
    "mahalanobis_sq",
    "CholeskyFactor",
    "SpdMatrix",
    "cholesky_decompose",
    "regularize_spd",
    "solve_spd",
    "PtlConfig",
    "PtlState",
    "SelectionManifest",
    "load_state",
    "run",
    "run_iteration",
    "save_state",
    "set_update",
    "SamplerConfig",
    "inclusion_probabilities",
    "select_candidates",
    "weight",
    "SyntheticWorld",
    "WorldConfig",
    "generate_world",
    "run_synthetic",
]
