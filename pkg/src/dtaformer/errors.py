"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration key or value."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class ShapeError(ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class InvalidInputError(ValueError):
    """Non-finite or otherwise unusable numeric input."""


class NumericalError(RuntimeError):
    """Training produced a non-finite value."""

    def __init__(self, message, batch_id=None, diagnostic=None):
        super().__init__(message)
        self.batch_id = batch_id
        self.diagnostic = diagnostic or {}


class BlockFormatError(ValueError):
    """Malformed block file; message names the file and line."""
