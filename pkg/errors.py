"""Exception hierarchy shared by the sampler modules and the CLI."""
from __future__ import annotations

from typing import Any, Optional


class ConfigurationError(ValueError):
    """Invalid preset, target, parameter or configuration key."""


class KindMismatchError(ConfigurationError):
    """A schedule of the wrong kind was handed to a half- or full-only consumer."""


class IncompatibleCheckpointError(ConfigurationError):
    def __init__(self, field: str, expected: Any, found: Any) -> None:
        super().__init__(
            f"Checkpoint field '{field}' does not match the run: expected {expected!r}, found {found!r}"
        )
        self.field = field
        self.expected = expected
        self.found = found


class DomainError(ValueError):
    """Time or state outside the segment a function is defined on."""


class ScheduleViolationError(ValueError):
    """g/r is not non-decreasing, so a diffusion coefficient went negative."""


class SingularReferenceError(ValueError):
    """The Gaussian reference density was requested where r(t) = 0."""


class UnsupportedDimensionError(ValueError):
    pass


class NumericalFailureError(RuntimeError):
    def __init__(self, message: str, *, t: Optional[float] = None, x: Any = None, step: Optional[int] = None) -> None:
        details = []
        if step is not None:
            details.append(f"step={step}")
        if t is not None:
            details.append(f"t={t:.6g}")
        if x is not None:
            details.append(f"x={x}")
        super().__init__(f"{message} ({', '.join(details)})" if details else message)
        self.t = t
        self.x = x
        self.step = step


class TrainingDivergedError(NumericalFailureError):
    pass


class EstimatorError(NumericalFailureError):
    pass


class SamplingFailureError(NumericalFailureError):
    pass


EXIT_OK = 0
EXIT_IO_ERROR = 1
EXIT_CONFIG_ERROR = 2
EXIT_NUMERICAL_FAILURE = 3


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (ConfigurationError, UnsupportedDimensionError)):
        return EXIT_CONFIG_ERROR
    if isinstance(exc, (NumericalFailureError, ScheduleViolationError, SingularReferenceError, DomainError)):
        return EXIT_NUMERICAL_FAILURE
    return EXIT_IO_ERROR
