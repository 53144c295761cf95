"""Exception types shared across the engine."""


class MarketClearError(Exception):
    """Base class for all engine errors."""


class ValidationError(MarketClearError):
    """Malformed input: bad shapes, unknown keys, inconsistent weights."""


class UnsupportedModelError(MarketClearError):
    """Model is well-formed but outside the solvable class of this engine."""


class AssumptionViolationError(MarketClearError):
    """A standing assumption fails at an evaluation point (e.g. singular fee matrix)."""


class BudgetError(MarketClearError):
    """A size budget (node count, atom count, agent count) would be exceeded."""


class SolverError(MarketClearError):
    """Direct solve hit a singular system or an iteration failed to converge."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics
