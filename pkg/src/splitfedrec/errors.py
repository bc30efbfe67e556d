"""Exception types shared across the package."""

from __future__ import annotations


class ContractViolation(ValueError):
    """An argument or state breaks an operation's precondition."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite or undefined value."""

    def __init__(self, message: str, layer_index: int | None = None) -> None:
        super().__init__(message)
        self.layer_index = layer_index


class NotFoundError(LookupError):
    """A referenced item, file or checkpoint does not exist."""


class ConfigError(ValueError):
    """An experiment configuration violates one of its invariants."""
