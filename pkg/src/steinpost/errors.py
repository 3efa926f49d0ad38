"""Exception hierarchy shared across the package.

Two broad failure classes are distinguished because the CLI maps them to
different exit codes: bad inputs or configuration (exit 2) versus numerical
breakdown such as degenerate data or unsalvageable conditioning (exit 3).
"""


class SteinPostError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(SteinPostError):
    """Invalid inputs, shapes, parameters, or configuration."""


class NumericalError(SteinPostError):
    """Numerical failure: degeneracy, non-finite values, division by zero."""


class DegenerateSeriesError(NumericalError):
    """A series or coordinate has zero variance where variation is required."""


class ConditioningError(NumericalError):
    """A linear system remained unsolvable after jitter escalation."""
