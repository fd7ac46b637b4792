"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class MtsaugError(Exception):
    """Base class for all package errors."""


class PanelError(MtsaugError, ValueError):
    """Malformed or unparseable price data."""


class EmptyDomainError(MtsaugError, ValueError):
    """A requested timescale leaves no time with a defined return."""


class DegenerateCrossSectionError(MtsaugError, ValueError):
    """Cross-section with fewer than two present returns or zero dispersion."""

    def __init__(self, time, message: str | None = None):
        self.time = time
        super().__init__(message or f"degenerate cross-section at t={time}")


class HistoryExhaustedError(MtsaugError, ValueError):
    """Training window reaches back before the first usable time."""

    def __init__(self, earliest_requested: int, earliest_available: int, tau: int):
        self.earliest_requested = earliest_requested
        self.earliest_available = earliest_available
        self.tau = tau
        self.shortfall = earliest_available - earliest_requested
        super().__init__(
            f"insufficient history: tau={tau} window needs t'={earliest_requested} but the first "
            f"defined return is at {earliest_available} (short by {self.shortfall})"
        )


class RegimeUndefinedError(MtsaugError, ValueError):
    """Fine-tuning requested for a target timescale with no shorter scales."""


class LeakageError(MtsaugError, AssertionError):
    """A training sample overlaps the evaluation window."""


class DivergenceError(MtsaugError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at optimizer step {step}")


class AssignmentError(MtsaugError, ValueError):
    """Too few scorable assets to fill every quantile."""


class DegenerateLegError(MtsaugError, ValueError):
    """A long or short leg is empty after applying the reversal restriction."""


class EmptyScheduleError(MtsaugError, ValueError):
    """A schedule with no rebalance times."""


class UndefinedStatisticError(MtsaugError, ValueError):
    """A diagnostic statistic cannot be computed from the given data."""


class ConfigError(MtsaugError, ValueError):
    """Invalid run configuration."""
