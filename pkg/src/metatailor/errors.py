"""Exception taxonomy shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments that violate its contract
    (shape mismatch, invalid configuration, missing mode, ...)."""


class NumericFault(ArithmeticError):
    """A numeric operation produced a non-finite result.

    NaN/inf never propagate silently: the op that produced them raises,
    carrying enough context (op kind, step, ...) to locate the fault.
    """

    def __init__(self, message: str, op_kind: str | None = None):
        super().__init__(message)
        self.op_kind = op_kind


class TrainingFault(NumericFault):
    """Training diverged (non-finite or exploding loss)."""

    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class GenerationFault(RuntimeError):
    """Data generation could not produce a valid sample within its retry
    budget. Callers may retry with a different seed."""
