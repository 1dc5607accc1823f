"""Exception hierarchy shared by every module of the package."""


class PointLKError(Exception):
    """Base class for all errors raised by pointlk."""


class InvalidArgumentError(PointLKError, ValueError):
    pass


class DegenerateInputError(PointLKError, ValueError):
    """Input is well-formed but geometrically degenerate (too few points, zero extent...)."""


class SingularityError(PointLKError, ArithmeticError):
    pass


class RankDeficiencyError(PointLKError, ArithmeticError):
    """Raised when a Jacobian or cross-covariance lacks the rank a solve needs.

    ``diagnostics`` carries whatever the raising site knows (singular values,
    condition number, voxel index).
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class ParseError(PointLKError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UnsupportedFormatError(PointLKError, ValueError):
    pass


class ConfigurationError(PointLKError, ValueError):
    """Bad network widths, bad config schema. ``field`` names the offending path."""

    def __init__(self, message, field=None):
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)
        self.field = field


class ModeError(PointLKError, RuntimeError):
    pass


class ContractViolationError(PointLKError, RuntimeError):
    pass


class NonFiniteError(PointLKError, FloatingPointError):
    pass
