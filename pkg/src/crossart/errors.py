"""Exception types raised across the package."""


class CrossArtError(Exception):
    """Base class for all package errors."""


class ShapeError(CrossArtError, ValueError):
    pass


class InvalidDimensionError(ShapeError):
    pass


class DomainError(CrossArtError, ValueError):
    pass


class NonFiniteInputError(CrossArtError, ValueError):
    pass


class StepUnderflowError(CrossArtError):
    pass


class MissingNoiseError(CrossArtError):
    pass


class InvalidConfigError(CrossArtError, ValueError):
    pass


class ContextError(CrossArtError):
    pass


class VersionError(CrossArtError):
    pass


class DivergenceError(CrossArtError, FloatingPointError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss
