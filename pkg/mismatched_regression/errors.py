"""
Exception hierarchy for the mismatched regression engine.
Every error carries the process exit code the CLI reports for it.
"""

from typing import Optional


class ModelError(Exception):
    """Base class for every error raised by the engine."""

    exit_code = 1


class DomainError(ModelError, ValueError):
    """An argument lies outside the domain of the requested operation."""


class UnsupportedPotentialError(ModelError):
    """The operation is only defined for some potential kinds."""


class EvaluationError(ModelError):
    """A quadrature integrand produced a non-finite value."""

    def __init__(self, message: str, node: Optional[int] = None):
        super().__init__(message)
        self.node = node


class NumericalError(ModelError):
    """Factorization failure or broken internal consistency check."""


class ConfigError(ModelError):
    """Malformed experiment configuration."""

    exit_code = 2

    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field_path = field_path


class NonConvergenceError(ModelError):
    exit_code = 3


class SamplerHealthError(ModelError):
    """MALA acceptance collapsed after step adaptation."""

    exit_code = 4

    def __init__(self, message: str, acceptance_rate: float):
        super().__init__(message)
        self.acceptance_rate = acceptance_rate
