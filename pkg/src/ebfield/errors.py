"""Exception types shared across the package."""

from __future__ import annotations


class InvalidInputError(ValueError):
    """Malformed or inconsistent input data."""


class ModelMisspecificationError(RuntimeError):
    """The covariance system could not be factorized (not positive definite)."""


class SolverError(RuntimeError):
    """An iterative solver failed to produce a usable answer."""


class ConvergenceError(SolverError):
    """Iteration cap reached before the residual tolerance was met."""

    def __init__(self, message: str, residuals: list[float]):
        super().__init__(message)
        self.residuals = list(residuals)


class DisconnectedGraphError(InvalidInputError):
    def __init__(self, components: list[list[int]]):
        self.components = components
        listing = "; ".join("{" + ", ".join(str(i) for i in c) + "}" for c in components)
        super().__init__(f"graph is disconnected, {len(components)} components: {listing}")


class ToleranceError(RuntimeError):
    """Distributed and centralized results disagree beyond tolerance."""


class ScenarioValidationError(InvalidInputError):
    """A well-formed scenario that violates a consistency rule."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid scenario: " + "; ".join(self.problems))
