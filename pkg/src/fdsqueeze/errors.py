"""Exception hierarchy shared by all modules."""


class FdsqueezeError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(FdsqueezeError, ValueError):
    """A parameter set violates its invariants."""


class SingularEvaluationError(FdsqueezeError, ArithmeticError):
    """A response function hit an exact pole on the requested grid."""

    def __init__(self, what, index, omega):
        self.index = int(index)
        self.omega = float(omega)
        super().__init__(
            f"{what} is singular at bin {self.index} "
            f"(omega = {self.omega:.6g} rad/s, f = {self.omega / (2 * 3.141592653589793):.6g} Hz)"
        )


class DomainError(FdsqueezeError, ValueError):
    """A closed-form expression was evaluated outside its domain."""

    def __init__(self, message, value=None):
        self.value = value
        super().__init__(message)


class RecordLengthError(FdsqueezeError, ValueError):
    """A time series is too short for the requested estimator settings."""


class GridMismatchError(FdsqueezeError, ValueError):
    """Two spectra or a filter and a Welch configuration disagree on their grid."""


class CsvParseError(FdsqueezeError, ValueError):
    def __init__(self, path, line, reason):
        self.path = str(path)
        self.line = int(line)
        super().__init__(f"{self.path}:{self.line}: {reason}")


class DegenerateFitError(FdsqueezeError, ValueError):
    """The data carries no information about the fitted parameters."""


class ZeroSpectrumError(SingularEvaluationError, ZeroDivisionError):
    """A spectrum used as a divisor vanishes at some bin."""


class DegenerateDataError(FdsqueezeError, ValueError):
    """A record carries no usable signal (e.g. an all-zero channel)."""
