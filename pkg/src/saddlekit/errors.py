"""Exception hierarchy shared by all saddlekit modules."""


class SaddlekitError(Exception):
    """Base class for library errors."""


class ContractError(SaddlekitError, ValueError):
    """An operation was called outside its precondition (shape, sign, count)."""


class ConvergenceError(SaddlekitError, ArithmeticError):
    """An iterative solve stopped before reaching its tolerance."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class NumericalError(SaddlekitError, ArithmeticError):
    """Non-finite values or a failed factorization."""


class ParseError(SaddlekitError, ValueError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(SaddlekitError, ValueError):
    """Invalid experiment configuration."""
