from typing import Any, Optional


class SVMFrameError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class ConfigurationError(SVMFrameError):
    """Invalid scenario or parameter combination."""

    exit_code = 1

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericalError(SVMFrameError):
    """Numerical failure during a run."""

    exit_code = 2


class ConvergenceError(NumericalError):
    def __init__(self, message: str, residual: float, iterate: Any = None):
        super().__init__(f"{message} (achieved relative residual {residual:.3e})")
        self.residual = residual
        self.iterate = iterate


class StabilityError(NumericalError):
    def __init__(self, dt: float, admissible_dt: float):
        super().__init__(f"time step {dt:.6g} violates the explicit stability bound; admissible dt <= {admissible_dt:.6g}")
        self.dt = dt
        self.admissible_dt = admissible_dt


class DomainEscapeError(NumericalError):
    def __init__(self, message: str, last_state: Any):
        super().__init__(message)
        self.last_state = last_state


class OutOfRangeError(NumericalError):
    pass


class DegenerateInputError(NumericalError):
    pass


class ZeroNormError(NumericalError):
    pass


class ShapeError(NumericalError):
    pass


class PreconditionError(NumericalError):
    pass


class ToleranceFailure(SVMFrameError):
    """Crosscheck finished but at least one check exceeded its tolerance."""

    exit_code = 3


class OutputError(SVMFrameError):
    """Output directory or file cannot be created or written."""

    exit_code = 1
