"""
errors.py

Exception hierarchy shared by the impact-study modules. Every error carries the
process exit code the command-line driver reports for it:

    1  usage / configuration error
    2  data error (schema, empty tape, unknown scope)
    3  numerical failure (fits, domains, ill-conditioned solves)
"""

from dataclasses import dataclass


class StudyError(Exception):
    exit_code = 1


class ConfigError(StudyError):
    exit_code = 1


class DataError(StudyError):
    exit_code = 2


class SchemaError(DataError):
    pass


class RowErrorBudgetExceeded(DataError):
    pass


class EmptyTapeError(DataError):
    pass


class EmptyScopeError(DataError):
    pass


class ScopeError(DataError):
    pass


class NumericalError(StudyError):
    exit_code = 3


class FitError(NumericalError):
    pass


class DomainError(NumericalError):
    pass


class KernelSolveError(NumericalError):
    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class DegenerateStatisticError(NumericalError):
    pass


@dataclass(frozen=True)
class RowError:
    """A malformed data row; line numbers are 1-based and count the header."""
    line: int
    column: str
    value: str
    message: str

    def __str__(self):
        return f"line {self.line}: column '{self.column}' value {self.value!r}: {self.message}"
