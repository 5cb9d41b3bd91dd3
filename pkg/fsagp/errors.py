"""Exception hierarchy."""

from __future__ import annotations

from typing import Any

__all__ = [
    "AssemblyError",
    "ConfigError",
    "ConvergenceError",
    "DomainError",
    "FactorizationError",
    "FitError",
    "FsaError",
    "NumericalError",
]


class FsaError(Exception):
    """Base class of all errors raised by `fsagp`."""


class DomainError(FsaError, ValueError):
    """An argument is outside the domain of the operation."""


class AssemblyError(FsaError):
    """A covariance block could not be assembled (singular after jitter)."""


class FactorizationError(FsaError):
    """A Cholesky factorization failed."""

    def __init__(self, stage: str, detail: str = "") -> None:
        """Record the factorization `stage` that failed."""

        self.stage = stage
        msg = f"factorization failed at stage {stage!r}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class NumericalError(FsaError):
    """An iterative method broke down."""

    def __init__(self, msg: str, iteration: int | None = None) -> None:
        """Record the `iteration` at which the breakdown was detected."""

        self.iteration = iteration
        if iteration is not None:
            msg = f"{msg} (iteration {iteration})"
        super().__init__(msg)


class ConvergenceError(NumericalError):
    """Conjugate gradients reached its iteration cap."""

    def __init__(self, msg: str, report: Any = None) -> None:
        """Keep the `SolveReport` of the failed solve."""

        self.report = report
        super().__init__(msg, getattr(report, "iterations", None))


class ConfigError(FsaError):
    """The run configuration or a data file violates its schema."""


class FitError(FsaError):
    """Parameter estimation failed persistently."""

    def __init__(self, msg: str, trace: list[float] | None = None) -> None:
        """Keep the negative log-likelihood `trace` up to the failure."""

        self.trace = trace or []
        super().__init__(msg)
