"""Exception types shared across the package."""


class DiffprError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(DiffprError, ValueError):
    """Array shape violates an operator precondition (e.g. non power-of-two grid)."""


class ParameterError(DiffprError, ValueError):
    """Scalar/config parameter outside its valid range."""


class FormatError(DiffprError, ValueError):
    """File has an unsupported format, corrupt header, or truncated payload."""


class ConfigError(DiffprError, ValueError):
    """Experiment config failed validation; message names the offending field."""


class CheckpointError(DiffprError, ValueError):
    """Checkpoint is corrupt or its architecture hash does not match."""


class TrainingError(DiffprError, RuntimeError):
    """Training diverged; message carries epoch/batch diagnostics."""


class DivergenceError(DiffprError, RuntimeError):
    """An iterative solver produced a nonfinite iterate.

    ``step`` is the loop index at which divergence was detected and ``stage``
    names the sub-step (e.g. "reverse_step", "data_step").
    """

    def __init__(self, message: str, step: int | None = None, stage: str | None = None):
        super().__init__(message)
        self.step = step
        self.stage = stage
