from __future__ import annotations

from typing import Literal, Sequence

ErrorCategory = Literal["config", "data", "simulation", "report"]
"""Error classes the command line maps onto distinct exit codes."""

EXIT_CODES: dict[ErrorCategory, int] = {
    "config": 3,
    "data": 4,
    "simulation": 5,
    "report": 6,
}


class AircompError(Exception):
    """Base class for every error raised by aircomp_fl."""

    category: ErrorCategory = "simulation"

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.category]


class ConfigError(AircompError):
    """The scenario configuration is malformed or violates a model assumption.

    `violations` lists every failed check, not only the first one."""

    category: ErrorCategory = "config"

    def __init__(self, violations: Sequence[str]) -> None:
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class DataError(AircompError):
    """A dataset could not be generated, loaded or partitioned."""

    category: ErrorCategory = "data"


class IdxParseError(DataError):
    """An IDX container could not be parsed."""


class BadMagicError(IdxParseError):
    """The IDX magic number is not one of the supported image/label codes."""


class TruncatedPayloadError(IdxParseError):
    """The IDX header or payload is shorter than the header declares."""


class DimensionOverflowError(IdxParseError):
    """The IDX dimension sizes describe more elements than can be addressed."""


class ShapeError(AircompError):
    """A model, gradient or dataset has the wrong dimensions."""


class ChannelError(AircompError):
    """Raised for invalid channel inputs and for power-cap violations."""


class AggregationError(AircompError):
    """The parameter server cannot form an estimate, e.g. an entry has no
    selected worker or no local models were supplied."""


class UnboundedGapError(AggregationError):
    """B_t is unbounded because some entry has no selected worker."""


class SchedulerError(AircompError):
    """The scheduler received an instance it refuses to solve."""


class DegenerateEntryError(SchedulerError):
    """|w_{t-1}| + eta is zero, so the maximum scaling factor diverges."""


class ReportError(AircompError):
    """A report file could not be written or read."""

    category: ErrorCategory = "report"
