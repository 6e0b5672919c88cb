class TSNetError(Exception):
    """Base class for all errors raised by the package."""


class ShapeError(TSNetError, ValueError):
    pass


class ContractError(TSNetError, ValueError):
    """A documented precondition was violated."""


class NumericError(TSNetError, FloatingPointError):
    """A NaN or Inf showed up where finite values are required."""


class SchemaError(TSNetError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class DataParseError(TSNetError, ValueError):
    pass


class ConfigError(TSNetError, ValueError):
    pass


class DivergenceError(TSNetError, RuntimeError):
    """Training produced a non-finite loss.

    ``checkpoint`` carries the last parameters for which the loss was finite.
    """

    def __init__(self, message, checkpoint=None, epoch=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.epoch = epoch
