"""Exceptions raised by the LAST package.

The command-line entry point maps each family onto an exit code, so library
code should raise the most specific class available.
"""


class ConfigurationError(ValueError):
    """An invalid, unknown or inconsistent configuration value."""


class ShapeError(ValueError):
    """Tensor extents that do not fit together."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (second backward, missing gradient...)."""


class CacheError(OSError):
    """A feature cache or binary artifact that cannot be read, written or trusted."""

    def __init__(self, message, sample_id=None):
        super().__init__(message)
        self.sample_id = sample_id

    def __str__(self):
        message = self.args[0] if self.args else ""
        if self.sample_id is not None:
            return "%s (sample %s)" % (message, self.sample_id)
        return message


class NumericError(ArithmeticError):
    """Non-finite values met during training."""

    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
