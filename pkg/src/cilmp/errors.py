"""Exception hierarchy shared across the package."""


class CilmpError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(CilmpError):
    """Operand shapes are incompatible for the requested operation."""


class DegenerateInputError(CilmpError):
    """Input is numerically degenerate (e.g. zero norm, zero variance)."""


class EvaluationError(CilmpError):
    """A computation produced a non-finite value or was fed one."""


class LabelError(CilmpError):
    """A class label lies outside the valid range."""


class LengthError(CilmpError):
    """A sequence exceeds the maximum supported length."""


class ConfigError(CilmpError):
    """Invalid or inconsistent configuration."""


class FormatError(CilmpError):
    """A serialized file is malformed.

    Carries ``byte_offset`` locating the first offending byte when known.
    """

    def __init__(self, message: str, byte_offset: int | None = None):
        if byte_offset is not None:
            message = f"{message} (at byte offset {byte_offset})"
        super().__init__(message)
        self.byte_offset = byte_offset


class FrozenParameterError(CilmpError):
    """Attempted to optimize or register gradients on a frozen parameter."""


class MetricError(CilmpError):
    """A metric is undefined for the given inputs."""


class NumericalAbort(CilmpError):
    """Training aborted because the loss became non-finite.

    Carries diagnostics: epoch, step and the gradient norms at the abort.
    """

    def __init__(self, message: str, epoch: int, step: int, grad_norms: dict):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.grad_norms = grad_norms
