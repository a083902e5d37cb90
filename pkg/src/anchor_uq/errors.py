"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid model, training or optimization configuration."""


class ShapeError(ValueError):
    """Array shapes inconsistent with a model or operation."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""

    def __init__(self, message, value=None):
        super().__init__(message)
        self.value = value


class DomainError(ValueError):
    """Argument outside the mathematical domain of a function."""


class FitError(RuntimeError):
    """A surrogate could not be fitted (e.g. Cholesky failed after max jitter)."""


class EvaluationError(RuntimeError):
    """A black-box function returned a non-finite value."""

    def __init__(self, message, x=None):
        super().__init__(message)
        self.x = x


class ScoringError(ValueError):
    """AUC scoring called with a degenerate normalization range."""


class MetricError(ValueError):
    """A metric is undefined for the given input (e.g. only one class present)."""


class DegenerateEstimatorError(ValueError):
    """The requested estimator cannot produce uncertainty (e.g. MC dropout with rate 0)."""


class DataFormatError(ValueError):
    """A data file could not be parsed; ``line`` is the 1-based line number when known."""

    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line
