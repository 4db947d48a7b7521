"""Exception hierarchy shared by every module in the package."""

from __future__ import annotations


class InfselError(Exception):
    """Base class for all package errors."""


class ContractError(InfselError, ValueError):
    """An argument violates a documented precondition (shape, length, range)."""


class ConfigError(InfselError, ValueError):
    """A configuration value is invalid or produces an unusable setup."""


class SchemaError(ConfigError):
    """A CSV schema does not match the file."""


class EmptyDatasetError(InfselError, ValueError):
    pass


class ParseError(InfselError, ValueError):
    def __init__(self, message: str, row: int, column: int):
        super().__init__(f"{message} (row {row}, column {column})")
        self.row = row
        self.column = column


class DecompositionError(InfselError, ArithmeticError):
    """Cholesky factorization hit a non-positive pivot."""

    def __init__(self, pivot: int, message: str | None = None):
        super().__init__(message or f"matrix is not positive definite: non-positive pivot at index {pivot}")
        self.pivot = pivot


class NumericBreakdownError(InfselError, ArithmeticError):
    pass


class ConvergenceError(InfselError, RuntimeError):
    def __init__(self, message: str, grad_norm: float):
        super().__init__(f"{message} (final gradient norm {grad_norm:.3e})")
        self.grad_norm = grad_norm


class SizeError(InfselError, ValueError):
    pass


class BudgetError(InfselError, RuntimeError):
    def __init__(self, required: int, budget: int):
        super().__init__(f"exhaustive search needs {required} refits, budget is {budget}")
        self.required = required
        self.budget = budget
