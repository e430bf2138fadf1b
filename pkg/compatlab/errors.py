"""Exception hierarchy shared by every compatlab module."""

from typing import Optional


class CompatLabError(Exception):
    """Base class for all lab failures"""


class ConfigurationError(CompatLabError, ValueError):
    """A configuration field holds an invalid value"""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class AllocationError(CompatLabError):
    """A split cannot be allocated with the requested fraction"""


class ShapeError(CompatLabError, ValueError):
    """Array dimensions do not match"""


class LossUndefinedError(CompatLabError):
    """The loss has no value for this input (e.g. a single class)"""


class CoverageError(CompatLabError):
    """A label has no row in the prototype matrix it is scored against"""


class InapplicableLossError(CompatLabError):
    """The loss cannot be used with this split"""


class BatchCompositionError(CompatLabError):
    """The mini-batch lacks the classes the loss needs"""


class SingletonClassError(CompatLabError):
    """A class graph needs at least two vertices"""


class DegeneratePrototypeError(CompatLabError):
    """Pooled prototype has (near) zero norm and cannot be normalised"""


class NumericalFailureError(CompatLabError, FloatingPointError):
    """NaN/inf values or an ill-conditioned linear system"""

    def __init__(self, message: str, condition: Optional[float] = None):
        self.condition = condition
        super().__init__(message)


class TrainingDivergedError(NumericalFailureError):
    """Training produced a non-finite loss; carries the last good snapshot"""

    def __init__(self, message: str, epoch: int, last_good=None, checkpoint_path=None):
        self.epoch = epoch
        self.last_good = last_good
        self.checkpoint_path = checkpoint_path
        super().__init__(message)


class FrozenStateError(CompatLabError):
    """A parameter set that must stay frozen changed during training"""


class IncompatibleArchitectureError(CompatLabError):
    """Models cannot be cross-tested (different embedding sizes)"""


class StageError(CompatLabError):
    """Wraps a failure with the pipeline stage it happened in"""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
