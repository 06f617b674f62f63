"""Per-category multivariate Gaussian over embeddings.

Fits the population mean/covariance of a labeled feature set, evaluates the
squared Mahalanobis domain gap of a query against the fitted model, and
carries the shared-covariance discriminant kernel that collapses the
two-class Gaussian posterior onto a sigmoid over a linear head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptySet,
    NonFiniteValue,
    NotPositiveDefinite,
    SingularCovariance,
)
from .linalg import CholeskyFactor, SpdMatrix, cholesky_decompose, regularize_spd, solve_spd

MAX_INSTANCE_ID = 2**64 - 1

# On factorization failure the ridge scale is multiplied by 10, at most
# this many times, before giving up. Small real sets routinely produce
# rank-deficient covariances, so one fixed ridge is not enough.
RIDGE_ESCALATIONS = 3


@dataclass(frozen=True)
class FeatureVector:
    """One instance's embedding, keyed by a unique 64-bit id."""

    instance_id: int
    values: np.ndarray

    def __init__(self, instance_id: int, values):
        if not (0 <= int(instance_id) <= MAX_INSTANCE_ID):
            raise ValueError(f"instance_id {instance_id} outside unsigned 64-bit range")
        v = np.asarray(values, dtype=np.float64)
        if v.ndim != 1 or v.shape[0] < 1:
            raise DimensionMismatch(f"feature values must be a nonempty vector, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise NonFiniteValue(f"instance {instance_id} has non-finite feature values")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "instance_id", int(instance_id))
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class FeatureSet:
    """A labeled collection of feature vectors sharing one dimension."""

    category: str
    dim: int
    members: tuple[FeatureVector, ...]

    def __init__(self, category: str, dim: int, members: Sequence[FeatureVector] = ()):
        if dim < 1:
            raise DimensionMismatch("dim must be >= 1")
        members = tuple(members)
        seen: set[int] = set()
        for fv in members:
            if fv.dim != dim:
                raise DimensionMismatch(
                    f"instance {fv.instance_id} has dim {fv.dim}, set requires {dim}"
                )
            if fv.instance_id in seen:
                raise ValueError(f"duplicate instance_id {fv.instance_id} in feature set")
            seen.add(fv.instance_id)
        object.__setattr__(self, "category", category)
        object.__setattr__(self, "dim", dim)
        object.__setattr__(self, "members", members)

    def __len__(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class GaussianClassModel:
    """Fitted (mean, covariance) plus the ready-to-solve Cholesky factor.

    The covariance is the population (divide-by-N) estimate of the fitting
    set plus whatever ridge was actually applied; ``ridge_scale_used``
    records the final (possibly escalated) scale.
    """

    category: str
    mean: np.ndarray
    covariance: SpdMatrix
    factor: CholeskyFactor
    sample_count: int
    ridge_scale_used: float

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class LinearHead:
    """Weights and bias of the equivalent sigmoid-input linear classifier."""

    weights: np.ndarray
    bias: float

    def __post_init__(self):
        if not (np.isfinite(self.weights).all() and math.isfinite(self.bias)):
            raise NonFiniteValue("linear head has non-finite entries")

    def apply(self, x) -> float:
        return float(self.weights @ _values(x) + self.bias)


@dataclass(frozen=True)
class PriorPair:
    """Unnormalized class priors (background, category)."""

    beta0: float
    beta1: float

    def __post_init__(self):
        if not (self.beta0 > 0 and self.beta1 > 0):
            raise ValueError("priors must be strictly positive")


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, FeatureVector) else np.asarray(x, dtype=np.float64)


def fit_gaussian(d: FeatureSet, ridge_scale: float) -> GaussianClassModel:
    """Fit mean and population covariance of ``d``, regularized until factorizable.

    The covariance uses the divide-by-N normalization (not N-1): the
    mean self-distance identity (average squared Mahalanobis of the fitting
    members equals the dimension) depends on it.
    """
    if ridge_scale < 0:
        raise ValueError("ridge_scale must be nonnegative")
    n = len(d.members)
    if n < 2:
        raise EmptySet(f"need at least 2 members to fit, got {n}")
    x = np.stack([fv.values for fv in d.members])
    mean = x.mean(axis=0)
    centered = x - mean
    raw = SpdMatrix(centered.T @ centered / n)

    scale = ridge_scale
    for _ in range(RIDGE_ESCALATIONS + 1):
        covariance = regularize_spd(raw, scale)
        try:
            factor = cholesky_decompose(covariance)
        except NotPositiveDefinite:
            scale *= 10.0
            continue
        return GaussianClassModel(
            category=d.category,
            mean=mean,
            covariance=covariance,
            factor=factor,
            sample_count=n,
            ridge_scale_used=scale,
        )
    raise SingularCovariance(
        f"covariance of {n} samples in dim {d.dim} not factorizable "
        f"even at ridge_scale {scale / 10.0:g}"
    )


def mahalanobis_sq(model: GaussianClassModel, x) -> float:
    """Squared Mahalanobis distance (x−μ)ᵀΣ⁻¹(x−μ); no square root is taken.

    Evaluated as ‖L⁻¹(x−μ)‖² through one triangular solve against the
    cached factor.
    """
    v = _values(x)
    if v.shape[0] != model.dim or v.ndim != 1:
        raise DimensionMismatch(f"query of shape {v.shape} against model dim {model.dim}")
    z = model.factor.forward_solve(v - model.mean)
    return float(z @ z)


def lda_linearize(
    model0: GaussianClassModel,
    model1: GaussianClassModel,
    shared: SpdMatrix,
    priors: PriorPair,
) -> LinearHead:
    """Collapse the shared-covariance two-class posterior to (w, b).

    w = Σ⁻¹(μ₁−μ₀) (column form) and
    b = −½·μ₁ᵀΣ⁻¹μ₁ + ½·μ₀ᵀΣ⁻¹μ₀ + log(β₁/β₀),
    both evaluated with the shared covariance.
    """
    if not (model0.dim == model1.dim == shared.dim):
        raise DimensionMismatch(
            f"dims differ: {model0.dim}, {model1.dim}, shared {shared.dim}"
        )
    factor = cholesky_decompose(shared)
    w = solve_spd(factor, model1.mean - model0.mean)
    b = (
        -0.5 * float(model1.mean @ solve_spd(factor, model1.mean))
        + 0.5 * float(model0.mean @ solve_spd(factor, model0.mean))
        + math.log(priors.beta1 / priors.beta0)
    )
    return LinearHead(weights=w, bias=b)


def _stable_sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (e + 1.0)


def gda_posterior(
    model0: GaussianClassModel,
    model1: GaussianClassModel,
    shared: SpdMatrix,
    priors: PriorPair,
    x,
) -> float:
    """Two-class posterior for the category under a shared covariance.

    The quadratic query terms cancel under the shared covariance, so the
    exponent is linear in x:
    z = (μ₁−μ₀)ᵀΣ⁻¹x − ½μ₁ᵀΣ⁻¹μ₁ + ½μ₀ᵀΣ⁻¹μ₀ + log(β₁/β₀),
    evaluated here by solving against the query (a float path independent of
    :func:`lda_linearize`) and pushed through a sign-branched sigmoid so it
    stays finite for |z| up to the exp overflow limit.
    """
    v = _values(x)
    if not (model0.dim == model1.dim == shared.dim == v.shape[0]):
        raise DimensionMismatch(
            f"dims differ: {model0.dim}, {model1.dim}, shared {shared.dim}, x {v.shape}"
        )
    factor = cholesky_decompose(shared)
    z = (
        float((model1.mean - model0.mean) @ solve_spd(factor, v))
        - 0.5 * float(model1.mean @ solve_spd(factor, model1.mean))
        + 0.5 * float(model0.mean @ solve_spd(factor, model0.mean))
        + math.log(priors.beta1 / priors.beta0)
    )
    return _stable_sigmoid(z)
