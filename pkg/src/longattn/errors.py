"""Exception types shared across the package.

Every error carries a short machine-readable ``kind`` so the CLI can emit
structured error documents without string matching.
"""

from __future__ import annotations


class LongAttnError(ValueError):
    kind = "error"

    def __init__(self, message: str, *, field: str | None = None):
        super().__init__(message)
        self.field = field


class DimensionError(LongAttnError):
    kind = "dimension"


class ConfigurationError(LongAttnError):
    kind = "configuration"


class EmptyRowError(LongAttnError):
    kind = "empty_row"


class NonFiniteError(LongAttnError):
    kind = "non_finite"


class CausalityError(LongAttnError):
    kind = "causality"


class DomainError(LongAttnError):
    kind = "domain"


class EmptyCalibrationError(ConfigurationError):
    kind = "empty_calibration"


class SpanError(LongAttnError):
    kind = "invalid_span"


class AmbiguityError(LongAttnError):
    kind = "ambiguous_key"


class MissingKeyError(LongAttnError):
    kind = "missing_key"


class NeighborRangeError(LongAttnError):
    kind = "range"


class PermutationError(LongAttnError):
    kind = "permutation"


class LengthError(LongAttnError):
    kind = "target_too_small"


class AssertionFailure(LongAttnError):
    """A declared report assertion did not hold."""

    kind = "assertion_failed"
