"""Exception hierarchy shared by every farebench module.

Each family maps to one CLI exit code (see ``exit_code_for``).
"""

from __future__ import annotations


class FarebenchError(Exception):
    """Base class for all errors raised by farebench."""

    exit_code = 1


class ConfigError(FarebenchError):
    exit_code = 2


class MissingUpstreamError(ConfigError):
    """A stage was asked to run before the stage it depends on."""

    def __init__(self, stage: str, prerequisite: str):
        self.stage = stage
        self.prerequisite = prerequisite
        super().__init__(
            f"stage '{stage}' needs cached output from '{prerequisite}'; "
            f"run `farebench {prerequisite}` first"
        )


class DataError(FarebenchError, ValueError):
    exit_code = 3


class SchemaError(DataError):
    def __init__(self, missing: list[str], unknown: list[str]):
        self.missing = list(missing)
        self.unknown = list(unknown)
        super().__init__(f"CSV header mismatch: missing columns {self.missing}, unknown columns {self.unknown}")


class EmptyDatasetError(DataError):
    pass


class DegenerateSplitError(DataError):
    pass


class UnknownColumnError(DataError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class ImputationInfeasibleError(DataError):
    pass


class QuantileUndefinedError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class AlignmentError(DataError):
    pass


class DomainError(DataError):
    pass


class ContractError(FarebenchError, ValueError):
    pass


class ShapeError(ContractError):
    pass


class EnsembleError(ContractError):
    pass


class NumericFailure(FarebenchError, ArithmeticError):
    exit_code = 4


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, FarebenchError):
        return exc.exit_code
    if isinstance(exc, FileNotFoundError):
        return DataError.exit_code
    return 1
