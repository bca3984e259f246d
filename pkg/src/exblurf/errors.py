"""Exception types raised across the engine."""


class BranchCutError(ValueError):
    """Rotation too close to pi for a unique logarithm."""


class CapacityError(RuntimeError):
    """A grid operation would exceed the configured parameter budget."""


class StateError(RuntimeError):
    """An operation was called without the state it depends on."""


class NumericError(ArithmeticError):
    """A loss or gradient became non-finite."""

    def __init__(self, message, iteration=None, parts=None):
        super().__init__(message)
        self.iteration = iteration
        self.parts = parts or {}
