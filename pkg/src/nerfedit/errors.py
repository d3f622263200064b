"""Shared exception types."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class DimensionError(ContractError):
    """Array shapes do not line up the way an operation requires."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where the pipeline cannot tolerate one."""


class ConfigError(ValueError):
    """An invalid or inconsistent configuration value."""


class TrainingDiverged(RuntimeError):
    """A training loss became non-finite.

    Carries the last known-good parameter snapshot so callers can recover.
    """

    def __init__(self, message, snapshot=None, iteration=None):
        super().__init__(message)
        self.snapshot = snapshot
        self.iteration = iteration
