"""Exception hierarchy shared by all modules."""


class LevyBsdeError(Exception):
    """Base class for every error raised by the package."""


class ParameterError(LevyBsdeError, ValueError):
    pass


class SamplerError(LevyBsdeError, RuntimeError):
    pass


class RangeError(LevyBsdeError, ValueError):
    pass


class GridError(LevyBsdeError, ValueError):
    pass


class DivergenceError(LevyBsdeError, ArithmeticError):
    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite state encountered at step {step}")


class MarkError(LevyBsdeError, ValueError):
    pass


class KernelError(LevyBsdeError, ValueError):
    pass


class ShapeError(LevyBsdeError, ValueError):
    pass


class ContractionError(LevyBsdeError, RuntimeError):
    pass


class BasisError(LevyBsdeError, RuntimeError):
    pass


class DirectionError(LevyBsdeError, ValueError):
    pass


class CapabilityError(LevyBsdeError, NotImplementedError):
    pass


class CoverageError(LevyBsdeError, KeyError):
    pass


class TreeSizeError(LevyBsdeError, ValueError):
    pass


class ConfigError(LevyBsdeError, ValueError):
    pass


class RegressionConditioningWarning(UserWarning):
    """Emitted when a regression design is badly conditioned."""
