""" Error taxonomy shared by every hybridca module.

Each error subclasses the closest builtin so callers may catch either the specific
class or the builtin (e.g. ``except ValueError``).
"""


class DimensionError(ValueError):
    """Shape or geometry mismatch between operands."""


class ParameterError(ValueError):
    """An invalid scalar parameter, e.g. a non-positive temperature."""


class ContractError(RuntimeError):
    """A precondition of an API call is violated by the caller."""


class NumericalError(FloatingPointError):
    """An operation produced a non-finite value."""


class DataError(ValueError):
    """A dataset, manifest or label problem."""

    def __init__(self, message: str, row: int | None = None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class DegenerateDataError(DataError):
    """Metric input without variation (constant vector, single class)."""


class FormatError(ValueError):
    """A tensor file does not follow the binary layout."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigError(ValueError):
    """A run configuration violates its schema."""

    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


class InvariantViolation(AssertionError):
    """An internal invariant was broken during computation."""


class MergeError(ValueError):
    """Aggregate reports cannot be merged into one table."""
