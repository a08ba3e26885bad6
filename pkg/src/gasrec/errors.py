"""Exception hierarchy shared by every gasrec module."""


class GasrecError(Exception):
    """Base class for all errors raised by gasrec."""


class ArgumentError(GasrecError, ValueError):
    """A caller passed an invalid argument (bad range, shape, or option)."""


class DataError(GasrecError):
    """Input data violates an invariant (missing block, gap in heights, ...)."""


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TransportError(GasrecError):
    """The JSON-RPC endpoint could not be reached or answered with an error."""


class FitError(GasrecError):
    """A parameter fit is degenerate (constant dimension, identical slopes)."""


class TrainingError(GasrecError):
    """Training hit a non-finite gradient or loss."""


class ModelLoadError(GasrecError):
    """A model file is truncated, corrupt, or of an unsupported version."""
