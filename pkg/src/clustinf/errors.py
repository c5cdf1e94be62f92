"""Exception hierarchy.

Each top-level class maps onto one CLI exit code: input problems exit 2,
numerical failures exit 3, calibration failures exit 4.
"""


class ClustinfError(Exception):
    exit_code = 1


class InputError(ClustinfError, ValueError):
    exit_code = 2


class InvalidPartitionError(InputError):
    pass


class SchemaError(InputError):
    pass


class DuplicateRowError(InputError):
    pass


class NumericalError(ClustinfError, ArithmeticError):
    exit_code = 3


class SingularDesignError(NumericalError):
    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class DegenerateInstrumentError(NumericalError):
    pass


class TooSmallClusterError(NumericalError):
    pass


class DegenerateStatisticError(NumericalError):
    pass


class DegenerateVarianceError(DegenerateStatisticError):
    pass


class EnumerationTooLargeError(InputError):
    pass


class DegenerateIntervalError(NumericalError):
    pass


class CalibrationError(ClustinfError, RuntimeError):
    exit_code = 4
