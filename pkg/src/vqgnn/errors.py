"""Exception hierarchy shared by every module."""


class VQGNNError(Exception):
    """Base class for all errors raised by this package."""


class InputError(VQGNNError, ValueError):
    """Malformed or out-of-range user input."""


class ConfigError(VQGNNError, ValueError):
    """Invalid or unsupported configuration."""


class NumericError(VQGNNError, ArithmeticError):
    """Non-finite values or a degenerate normalizer."""


class StateError(VQGNNError, RuntimeError):
    """An object was used with stale or mismatched state."""


class RunError(VQGNNError, RuntimeError):
    """Training diverged or otherwise failed mid-run."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch
