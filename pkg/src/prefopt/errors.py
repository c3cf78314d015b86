"""Exception types shared across the package."""

from __future__ import annotations


class PrefOptError(Exception):
    """Base class for all package-specific errors."""


class InvalidWeightsError(PrefOptError, ValueError):
    """Reference weighting coefficients violate their invariants."""


class InvalidConfigError(PrefOptError, ValueError):
    """A configuration value is out of its allowed domain."""


class NumericInputError(PrefOptError, ValueError):
    """A numeric input is outside the domain of the requested operation
    (non-finite, or a log-probability above zero)."""


class EncodingError(PrefOptError, ValueError):
    """Text contains tokens unknown to the vocabulary, or token ids are
    inconsistent with the policy's vocabulary."""


class ParseError(PrefOptError, ValueError):
    """A data file is malformed; the message names the offending line."""


class IntegrityError(PrefOptError, RuntimeError):
    """Stored artifacts disagree with each other (hash mismatch, duplicate
    ids, truncated cache body, unsupported format version)."""


class TapeConsumedError(PrefOptError, RuntimeError):
    """backward() was called on a gradient tape that was already used."""


class DivergenceError(PrefOptError, RuntimeError):
    """Training aborted because the batch loss crossed the divergence
    threshold.  Carries the partial metrics history."""

    def __init__(self, message: str, *, step: int, loss: float, history=None):
        super().__init__(message)
        self.step = step
        self.loss = loss
        self.history = list(history) if history is not None else []


class LockHeldError(PrefOptError, RuntimeError):
    """Another invocation holds the output-directory lock."""


class UsageError(PrefOptError, ValueError):
    """Bad command line or config file."""
