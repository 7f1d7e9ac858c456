"""Exception types shared across the package."""


class ShiftBenchError(Exception):
    """Base class for all shiftbench errors."""


class InsufficientDataError(ShiftBenchError):
    """Requested dataset cannot satisfy per-class minimums."""


class EmptyInputError(ShiftBenchError):
    """An operation received an empty set where samples are required."""


class EmptySubsetError(ShiftBenchError):
    """A subsampling request resolves to zero samples."""


class TooFewClassesError(ShiftBenchError):
    """Split-class sampling needs at least two classes."""


class UnknownArchitectureError(ShiftBenchError):
    """Architecture family is not registered."""


class UnknownMethodError(ShiftBenchError):
    """Adaptation method name is not registered."""


class ConfigError(ShiftBenchError):
    """Invalid, unknown, or ill-typed configuration content."""


class EmptyPretextError(ShiftBenchError):
    """Pretext subset construction removed every sample."""


class TooSmallBatchError(ShiftBenchError):
    """Contrastive batches need at least four samples for negatives."""


class AbortedRunError(ShiftBenchError):
    """Training produced a non-finite loss; carries the failing step."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class EmptyReportError(ShiftBenchError):
    """Report grouping matched no records in the store."""


class EmptyAxisError(ShiftBenchError):
    """A grid axis has no values."""
