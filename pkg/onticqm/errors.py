from __future__ import annotations


class OnticError(Exception):
    """Root of every numerical failure raised by the package."""

    def __init__(self, message: str, *, where: str = ""):
        super().__init__(message)
        self.where = where

    def __str__(self) -> str:
        message = super().__str__()
        if self.where:
            return f"{self.where}: {message}"
        return message


class NodeError(OnticError):
    """Density vanishes where the restricted momentum field is needed."""


class NonNormalizable(OnticError):
    pass


class SpanError(OnticError):
    pass


class OverlapError(OnticError):
    pass


class CausticError(OnticError):
    pass


class InstabilityError(OnticError):
    pass


class CFLError(OnticError):
    pass


class DomainError(OnticError, ValueError):
    pass


class ObservableOrderError(OnticError, ValueError):
    pass


class BornConsistencyError(OnticError):
    pass


class ConfigError(ValueError):
    pass


class SeparationWarning(UserWarning):
    pass
