"""Exception types shared across the package."""


class SelectiveFusionError(Exception):
    """Base class for all package errors."""


class ConfigError(SelectiveFusionError, ValueError):
    """Invalid configuration (unknown names, out-of-range parameters)."""


class DomainError(SelectiveFusionError, ValueError):
    """Input outside the domain of a geometric transform."""


class BehindCameraError(DomainError):
    """Point has non-positive depth and cannot be projected."""


class SingularSystemError(SelectiveFusionError, ArithmeticError):
    """Linear system is singular to within the pivot tolerance."""


class InvalidModelError(SelectiveFusionError, ValueError):
    """Measurement model violates its invariants (e.g. non-SPD covariance)."""


class InvalidInputError(SelectiveFusionError, ValueError):
    """Inputs have mismatched shapes or invalid values."""


class GenerationError(SelectiveFusionError, RuntimeError):
    """Scene generation could not place objects within its retry budget."""


class ParseError(SelectiveFusionError, ValueError):
    """Malformed record in a detection log."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(SelectiveFusionError, ValueError):
    """Well-formed record that does not match the expected schema."""


class DataError(SelectiveFusionError, LookupError):
    """Required data is missing from a scene source."""


class DivergenceError(SelectiveFusionError, FloatingPointError):
    """Training produced a non-finite loss."""


class EvaluationError(SelectiveFusionError, ValueError):
    """Evaluation cannot be computed (e.g. no classes with ground truth)."""
