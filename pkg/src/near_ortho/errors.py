"""Exception types shared across the package."""


class NearOrthoError(Exception):
    pass


class DimensionError(NearOrthoError, ValueError):
    pass


class DegeneracyError(NearOrthoError, ArithmeticError):
    pass


class NumericError(NearOrthoError, ArithmeticError):
    pass


class InputError(NearOrthoError, ValueError):
    pass


class ConfigError(NearOrthoError, ValueError):
    pass


class FormatError(NearOrthoError, ValueError):
    """Malformed binary file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DivergenceError(NearOrthoError, ArithmeticError):
    def __init__(self, epoch, step, loss):
        super().__init__(f"loss diverged at epoch {epoch}, step {step}: {loss!r}")
        self.epoch = epoch
        self.step = step
        self.loss = loss
