"""Exception hierarchy for pyoodbench.

Every error raised on purpose by the package derives from
:class:`OodBenchError`.  Errors about bad *values* (shapes, parameters,
config keys, file contents) also derive from :class:`ValueError`, and
failures that only show up while running (a diverging training run, a
non-finite ODIN gradient) derive from :class:`RuntimeError`, so callers
that already catch the built-in types keep working.
"""

from __future__ import annotations

__all__ = [
    "OodBenchError",
    "ShapeError",
    "DomainError",
    "ParameterError",
    "UsageError",
    "FitError",
    "ParseError",
    "ConfigError",
    "UndefinedMetricError",
    "TrainingError",
    "ScoringError",
]


class OodBenchError(Exception):
    """Base class for all pyoodbench errors."""


class ShapeError(OodBenchError, ValueError):
    """Array or tensor dimensions do not fit the operation."""


class DomainError(OodBenchError, ValueError):
    """A value lies outside the mathematical domain of an operation."""


class ParameterError(OodBenchError, ValueError):
    """A hyperparameter (temperature, length scale, ...) is out of range."""


class UsageError(OodBenchError, ValueError):
    """An operation was called with arguments it cannot work with."""


class FitError(OodBenchError, ValueError):
    """Fitting class-conditional statistics failed."""


class ParseError(OodBenchError, ValueError):
    """A CSV file does not match its schema.

    Attributes:
        row: 1-based row number in the file (the header is row 1), or
            ``None`` when the problem is not tied to a row.

    """

    def __init__(self, message: str, row: int | None = None) -> None:
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class ConfigError(OodBenchError, ValueError):
    """An experiment configuration is invalid."""


class UndefinedMetricError(OodBenchError, ValueError):
    """A metric is undefined for the given samples (e.g. no OOD samples)."""


class TrainingError(OodBenchError, RuntimeError):
    """Training diverged.

    Attributes:
        epoch: 1-based epoch in which the loss became non-finite.

    """

    def __init__(self, message: str, epoch: int | None = None) -> None:
        super().__init__(message)
        self.epoch = epoch


class ScoringError(OodBenchError, RuntimeError):
    """A scoring method produced a non-finite intermediate."""
