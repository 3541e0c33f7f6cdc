"""Exception types shared across the package."""


class GazeLabError(Exception):
    """Base class for all package errors."""


class ContractError(GazeLabError, ValueError):
    """A precondition on an argument was violated."""


class DimensionError(ContractError):
    """Operand shapes are incompatible for an operation."""


class NumericError(GazeLabError, ArithmeticError):
    """A non-finite value appeared where a finite one was required."""


class TrainingDivergenceError(NumericError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"training diverged: non-finite loss at epoch {epoch}")


class FormatError(GazeLabError, ValueError):
    """A file on disk does not match the expected binary layout."""


class ConfigError(ContractError):
    """An experiment configuration is invalid."""
