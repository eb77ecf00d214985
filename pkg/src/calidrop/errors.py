"""Exception types shared across the package.

Everything raised on purpose derives from :class:`CalidropError`, so callers
(and the CLI) can distinguish contract violations from genuine bugs.
"""

from __future__ import annotations


class CalidropError(Exception):
    """Base class for all errors raised by this package."""


class DimError(CalidropError):
    """Vector or matrix dimensions are inconsistent."""


class NumError(CalidropError):
    """Non-finite (NaN/Inf) values where finite reals are required."""


class EmptyInput(CalidropError):
    """An operation that needs at least one element got none."""


class ArgError(CalidropError):
    """An argument is outside its documented domain."""


class UnknownPosition(CalidropError):
    """A referenced token position does not exist in the store."""


class PositionOrder(CalidropError):
    """Appended token position is not strictly greater than stored ones."""


class MissingImportance(CalidropError):
    """An offloaded position has no importance score to rank by."""


class BudgetTooSmall(CalidropError):
    """Eviction budget cannot satisfy the policy's mandatory token set."""


class NullState(CalidropError):
    """Calibration state is the null sentinel and carries no mass."""


class InvalidThresholds(CalidropError):
    """Similarity thresholds are outside [-1, 1] or otherwise malformed."""


class RangeError(CalidropError):
    """An index or slice falls outside the addressed sequence."""


class FormatError(CalidropError):
    """A trace directory does not conform to the expected format."""


class TruncatedFile(CalidropError):
    """A required blob file is missing from a trace directory."""


class DimMismatch(CalidropError):
    """Blob byte counts disagree with the dimensions the manifest declares."""


class ConfigError(CalidropError):
    """A run configuration file or flag value cannot be interpreted."""
