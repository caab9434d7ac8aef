class StackWFAError(Exception):
    """Base error; ``exit_code`` is what the command line returns for it."""
    exit_code = 1


class UsageError(StackWFAError, ValueError):
    exit_code = 1


class DataError(StackWFAError):
    exit_code = 2


class NumericalError(StackWFAError, ArithmeticError):
    exit_code = 3
