"""Exception hierarchy shared by every module."""


class TTTError(Exception):
    """Base class for all library errors."""


class DomainError(TTTError, ValueError):
    """An input lies outside the domain of a formula."""


class AlignmentError(TTTError, ValueError):
    """Two observations cannot be combined (dates or maturities disagree)."""


class ParseError(TTTError, ValueError):
    """A CSV or JSON input is malformed."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class EmptySeriesError(TTTError, ValueError):
    """Ingestion produced no usable observation."""


class OrderingError(TTTError, ValueError):
    """Times are not in the required order."""


class RangeError(TTTError, ValueError):
    """A time lies beyond the admissible horizon."""


class DegenerateBridgeError(TTTError, ArithmeticError):
    """A bridge variance fell under the numerical floor."""


class FitError(TTTError, RuntimeError):
    """No optimizer start converged. ``best`` carries the best point seen."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class EMContractError(TTTError, RuntimeError):
    """The EM log-marginal decreased beyond tolerance."""


class BootstrapError(TTTError, RuntimeError):
    """Every bootstrap replication failed."""
