"""Exception hierarchy shared by every module."""


class TTACError(Exception):
    """Base class for all errors raised by the package."""


class ConfigurationError(TTACError, ValueError):
    """Inconsistent shapes, options or settings."""


class EmptyInputError(TTACError, ValueError):
    """An estimator received no data."""


class NumericalDomainError(TTACError, ArithmeticError):
    """A matrix that must be positive definite is not.

    ``pivot`` is the 0-based index of the failing Cholesky pivot and
    ``class_index`` names the cluster when the failure came from a per-class
    term.
    """

    def __init__(self, message, pivot=None, class_index=None):
        super().__init__(message)
        self.pivot = pivot
        self.class_index = class_index


class ValidationError(TTACError, ValueError):
    """Input violates a documented invariant (e.g. not a probability vector)."""


class AnchorError(TTACError, ValueError):
    """Source anchors cannot be built."""


class TrainingError(TTACError, RuntimeError):
    """Training diverged; ``epoch`` is where the loss went non-finite."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class ParseError(TTACError, ValueError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class FormatError(TTACError, ValueError):
    """A file parsed but its contents are inconsistent."""


class ReportError(TTACError, ValueError):
    """Metrics cannot be computed from the given run."""
