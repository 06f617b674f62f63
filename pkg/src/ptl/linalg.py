"""Dense symmetric-positive-definite linear algebra.

Backs the Gaussian representation-space model: Cholesky factorization,
triangular solves, and trace-scaled ridge regularization. The covariance
inverse is never materialized — quadratic forms are evaluated through
triangular solves against the cached factor.

All types are immutable after construction and all operations are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import get_lapack_funcs

from .errors import DimensionMismatch, NotPositiveDefinite

# One LAPACK handle for float64 triangular solves; resolving it per call
# costs more than the dim-32 solve itself.
_TRTRS = get_lapack_funcs(
    ("trtrs",), (np.empty((1, 1), dtype=np.float64), np.empty(1, dtype=np.float64))
)[0]


def _as_square_float(entries, what: str) -> np.ndarray:
    m = np.asarray(entries, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 1:
        raise DimensionMismatch(f"{what} must be a square matrix, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise DimensionMismatch(f"{what} contains non-finite entries")
    return m


@dataclass(frozen=True)
class SpdMatrix:
    """Symmetric matrix intended to be positive definite.

    Symmetry is enforced on construction by averaging with the transpose, so
    accumulation asymmetry from streaming covariance updates is tolerated.
    Positive definiteness is only established by a successful factorization.
    """

    dim: int
    entries: np.ndarray

    def __init__(self, entries):
        m = _as_square_float(entries, "SpdMatrix")
        object.__setattr__(self, "dim", m.shape[0])
        sym = (m + m.T) / 2.0
        sym.setflags(write=False)
        object.__setattr__(self, "entries", sym)

    @staticmethod
    def identity(dim: int) -> "SpdMatrix":
        return SpdMatrix(np.eye(dim))


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular factor L with L·Lᵀ equal to the source matrix.

    ``log_det`` is the log-determinant of the source matrix, i.e.
    2·Σ log(diagonal of L).
    """

    dim: int
    lower: np.ndarray
    log_det: float

    def forward_solve(self, v: np.ndarray) -> np.ndarray:
        """Solve L·z = v. ‖z‖² is the quadratic form vᵀ(LLᵀ)⁻¹v."""
        z, info = _TRTRS(self.lower, v, lower=1)
        if info != 0:
            raise NotPositiveDefinite(f"triangular solve failed (info={info})")
        return z

    def backward_solve(self, v: np.ndarray) -> np.ndarray:
        """Solve Lᵀ·u = v."""
        u, info = _TRTRS(self.lower, v, lower=1, trans=1)
        if info != 0:
            raise NotPositiveDefinite(f"triangular solve failed (info={info})")
        return u


def cholesky_decompose(m: SpdMatrix) -> CholeskyFactor:
    """Factor m = L·Lᵀ with L lower triangular and strictly positive diagonal.

    Raises NotPositiveDefinite when a pivot ≤ 0 is encountered, signalling
    the caller to regularize and retry.
    """
    try:
        lower = np.linalg.cholesky(m.entries)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"matrix of dim {m.dim} is not positive definite") from exc
    lower.setflags(write=False)
    log_det = float(2.0 * np.sum(np.log(np.diagonal(lower))))
    return CholeskyFactor(dim=m.dim, lower=lower, log_det=log_det)


def solve_spd(f: CholeskyFactor, v) -> np.ndarray:
    """Solve (L·Lᵀ)·u = v through two triangular solves."""
    vec = np.asarray(v, dtype=np.float64)
    if vec.ndim != 1 or vec.shape[0] != f.dim:
        raise DimensionMismatch(
            f"vector of length {vec.shape} against factor of dim {f.dim}"
        )
    return f.backward_solve(f.forward_solve(vec))


def regularize_spd(m: SpdMatrix, ridge_scale: float) -> SpdMatrix:
    """Return m + ε·I with ε = ridge_scale·trace(m)/dim.

    The ridge is trace-scaled so behaviour is invariant to the overall
    feature magnitude; when the trace is zero ε falls back to ridge_scale
    itself. The input is never mutated.
    """
    if ridge_scale < 0:
        raise ValueError("ridge_scale must be nonnegative")
    trace = float(np.trace(m.entries))
    eps = ridge_scale * trace / m.dim if trace != 0.0 else ridge_scale
    return SpdMatrix(m.entries + eps * np.eye(m.dim))
