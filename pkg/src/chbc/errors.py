"""Exception hierarchy shared by every module.

The CLI maps these onto stable exit codes: configuration and parameter
problems exit 2, data problems exit 3, numerical aborts exit 4.
"""

from __future__ import annotations


class ChbcError(Exception):
    exit_code = 1


class DimensionError(ChbcError, ValueError):
    exit_code = 2


class ParameterError(ChbcError, ValueError):
    exit_code = 2


class ConfigError(ChbcError, ValueError):
    exit_code = 2


class ContractError(ChbcError, RuntimeError):
    exit_code = 2


class DataError(ChbcError, ValueError):
    exit_code = 3


class HierarchyValidationError(DataError):
    """Base class for malformed tree hierarchies."""

    def __init__(self, message: str, level: int | None = None, index: int | None = None):
        super().__init__(message)
        self.level = level
        self.index = index


class ParentIndexError(HierarchyValidationError):
    pass


class ChildlessNodeError(HierarchyValidationError):
    pass


class DepthError(HierarchyValidationError):
    pass


class NumericalError(ChbcError, FloatingPointError):
    exit_code = 4
