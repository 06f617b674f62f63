"""Exception hierarchy shared across the engine.

Every error raised on a documented contract boundary derives from
:class:`PtlError` so callers (and the CLI exit-code mapping) can treat the
engine as a closed surface. Usage/config problems, data/validation problems,
and adapter failures are distinct branches because they map to distinct
process exit codes.
"""

from __future__ import annotations


class PtlError(Exception):
    """Base class for all engine errors."""


class ConfigError(PtlError):
    """Invalid configuration or argument usage (CLI exit code 1)."""


class DataError(PtlError):
    """Invalid data or failed validation (CLI exit code 2)."""


# --- linear algebra -------------------------------------------------------

class NotPositiveDefinite(DataError):
    """Cholesky factorization hit a non-positive pivot."""


class DimensionMismatch(DataError):
    """Operands disagree on vector/matrix dimension."""


# --- gaussian model -------------------------------------------------------

class EmptySet(DataError):
    """A feature set with fewer than two members was passed to fitting."""


class SingularCovariance(DataError):
    """Covariance stayed non-factorizable after escalating regularization."""


# --- domain gap -----------------------------------------------------------

class MissingScale(DataError):
    """A configured scale is absent from an instance's per-scale features."""


class EmptyScaleSet(DataError):
    """The evaluated scale list is empty."""


# --- sampling -------------------------------------------------------------

class EmptyPool(DataError):
    """Candidate selection was asked to draw from an empty pool."""


class PoolTooLarge(DataError):
    """Exact inclusion-probability enumeration limited to small pools."""


# --- loop bookkeeping -----------------------------------------------------

class UnknownId(DataError):
    """An instance id is not where the operation requires it to be."""


class IdMismatch(DataError):
    """Transformed record ids do not match the selected candidate ids."""


# --- i/o protocol ---------------------------------------------------------

class IoError(DataError):
    """Filesystem failure while writing or reading an artifact."""


class BadMagic(DataError):
    """Feature file does not start with the PTLF magic."""


class VersionMismatch(DataError):
    """Feature file declares an unsupported format version."""


class TruncatedFile(DataError):
    """Feature file body length disagrees with its declared count."""


class NonFiniteValue(DataError):
    """A feature vector contains NaN or infinity."""


class ParseError(DataError):
    """Malformed metadata CSV row; message carries the line number."""


class AdapterFailure(PtlError):
    """External backend exited nonzero or misbehaved (CLI exit code 3)."""

    def __init__(self, message: str, exit_code: int | None = None,
                 stderr_tail: str = ""):
        super().__init__(message)
        self.exit_code = exit_code
        self.stderr_tail = stderr_tail


class OutputValidationError(AdapterFailure):
    """Backend exited 0 but its declared outputs failed validation."""
