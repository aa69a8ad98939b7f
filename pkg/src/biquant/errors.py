"""Exception hierarchy shared by every stage of the quantization engine."""


class BiquantError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(BiquantError, ValueError):
    """A precondition of an operation was violated by the caller."""


class DimensionError(ContractError):
    """Operand shapes do not conform."""


class DomainError(BiquantError, ValueError):
    """A value lies outside the numeric domain of an operation."""


class InfeasibleError(BiquantError):
    """No assignment satisfies the bit budget."""


class OptimizationError(BiquantError, RuntimeError):
    """An optimizer produced a non-finite objective."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class TrainingError(OptimizationError):
    """Full-precision training diverged."""

    def __init__(self, message, epoch=None):
        super().__init__(message, step=epoch)
        self.epoch = epoch


class AUCUndefinedError(BiquantError, ValueError):
    """AUC requested on a single-class label set.

    The accuracy is still computed and carried on the exception.
    """

    def __init__(self, message, accuracy=None):
        super().__init__(message)
        self.accuracy = accuracy


class FormatError(BiquantError, ValueError):
    """A serialized artifact is corrupt or has the wrong layout."""


class StageError(BiquantError):
    """Wraps an error raised inside a pipeline stage, tagging the stage."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
