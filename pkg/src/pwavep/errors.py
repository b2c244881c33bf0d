"""Exception hierarchy shared by all pwavep modules."""


class PWavePError(Exception):
    """Base class for every error raised by pwavep."""

    exit_code = 1


class InvalidParameterError(PWavePError, ValueError):
    exit_code = 2


class ConfigError(PWavePError):
    exit_code = 2


class DataError(PWavePError, ValueError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class GraphError(PWavePError):
    """Graph cannot support spectral analysis (isolated node, disconnected)."""

    exit_code = 3


class CapacityError(PWavePError):
    """Problem too large for a dense solver."""

    exit_code = 2


class ConditioningError(PWavePError, ArithmeticError):
    exit_code = 3


class UnsupportedModeError(PWavePError):
    exit_code = 2


class OracleError(PWavePError):
    exit_code = 4


class NumericError(OracleError, ArithmeticError):
    pass


class TrainingError(PWavePError):
    exit_code = 1
