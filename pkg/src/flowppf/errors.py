"""Exception hierarchy.

Every error carries a CLI exit code so the command-line layer can map
failures without inspecting messages.
"""

from __future__ import annotations


class FlowPPFError(Exception):
    exit_code = 1

    def __init__(self, message: str, **context):
        super().__init__(message)
        self.message = message
        self.context = context


class ArgumentError(FlowPPFError, ValueError):
    exit_code = 2


class ShapeError(ArgumentError):
    """Operand shapes are incompatible for a primitive."""


class DataError(FlowPPFError):
    exit_code = 3


class ModelError(FlowPPFError):
    """A probabilistic model is invalid (e.g. covariance not SPD)."""

    exit_code = 3


class NumericError(FlowPPFError, ArithmeticError):
    exit_code = 4


class DivergenceError(NumericError):
    pass


class NonConvergenceError(NumericError):
    pass


class StateError(FlowPPFError, RuntimeError):
    exit_code = 4


class CapabilityError(FlowPPFError):
    exit_code = 2


class QualityError(FlowPPFError):
    exit_code = 4
