"""Exception and warning types raised by the solver library."""


class PLDMError(Exception):
    """Base class for all library errors."""


class DimensionMismatch(PLDMError, ValueError):
    pass


class EmptyNetwork(PLDMError, ValueError):
    pass


class NonFiniteValue(PLDMError, FloatingPointError):
    pass


class ZeroRegularity(PLDMError, ValueError):
    pass


class EmptyCopySet(PLDMError, RuntimeError):
    pass


class SingularStep(PLDMError, ZeroDivisionError):
    pass


class LinesearchStall(PLDMError, RuntimeError):
    pass


class InfeasibleNu(PLDMError, ValueError):
    pass


class InsufficientHistory(PLDMError, ValueError):
    pass


class NonMonotoneTail(PLDMError, ValueError):
    pass


class NoFeasiblePointFound(PLDMError, RuntimeError):
    pass


class InvalidParams(PLDMError, ValueError):
    pass


class ConfigError(PLDMError, ValueError):
    """Base for configuration problems (CLI exit code 2)."""


class ParseError(ConfigError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(ConfigError):
    pass


class DegenerateBox(UserWarning):
    """The sampling box has zero volume; constants fall back to point values."""
