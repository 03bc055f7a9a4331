"""Exception hierarchy shared by every module."""


class TabFlowError(Exception):
    """Base class for all package errors."""


class StructuralError(TabFlowError, ValueError):
    """Shapes, sizes, indices or file layouts that do not fit together."""


class NumericError(TabFlowError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class ConfigurationError(TabFlowError, ValueError):
    """Hyperparameters or config files that cannot describe a valid model."""
