"""
Exception types shared across the toolkit and their CLI exit codes.
"""
from typing import Optional


class CobrasError(Exception):
    pass


class ConfigError(CobrasError, ValueError):
    """Invalid experiment configuration or unsupported system."""


class NumericalError(CobrasError, ArithmeticError):
    pass


class NumericalBlowUp(NumericalError):
    """A state became non-finite while stepping a system."""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


class RankDeficiencyError(NumericalError):
    """Data does not support the requested reduced dimension."""


EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
