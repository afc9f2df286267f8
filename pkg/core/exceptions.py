"""Error taxonomy shared by every partrobust module.

Each class carries the exit status the command line reports for it.
"""


class PartRobustError(Exception):
    """Root of all partrobust errors"""

    exit_code = 1


class ConfigurationError(PartRobustError, ValueError):
    """Invalid shapes, extents, hyperparameters or config documents"""

    exit_code = 2


class UsageError(PartRobustError, RuntimeError):
    """An API called out of order or with mismatched arguments"""


class InputError(PartRobustError, ValueError):
    """A value outside the domain of an operation (e.g. a class index)"""


class DataError(PartRobustError, ValueError):
    """Malformed samples, masks or dataset exports"""


class NumericError(PartRobustError, ArithmeticError):
    """NaN or Inf produced by a primitive or a loss"""

    exit_code = 3


class CheckpointLoadError(PartRobustError, IOError):
    """Unreadable checkpoint or checkpoint/config mismatch"""
