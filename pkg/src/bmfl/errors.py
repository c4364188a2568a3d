"""Exception hierarchy shared by every subpackage.

The CLI maps these onto process exit codes: configuration problems exit 2,
data problems exit 3 and numerical failures exit 4.
"""


class BMFLError(Exception):
    exit_code = 1


class ConfigError(BMFLError, ValueError):
    exit_code = 2


class DimensionError(BMFLError, ValueError):
    exit_code = 2


class InputError(BMFLError, ValueError):
    exit_code = 3


class FormatError(InputError):
    """A serialized file is truncated, corrupted or of an unknown version."""


class NumericalError(BMFLError, ArithmeticError):
    exit_code = 4


class DegenerateInputError(NumericalError):
    """A statistic is undefined for the given input (e.g. zero variance)."""


class StepRangeError(BMFLError, IndexError):
    exit_code = 2
