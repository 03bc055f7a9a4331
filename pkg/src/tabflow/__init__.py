"""Conditional density regression on tabular data with rational-quadratic spline flows."""
from ._kernels import BACKEND
from .errors import ConfigurationError, NumericError, StructuralError, TabFlowError

__all__ = ["BACKEND", "ConfigurationError", "NumericError", "StructuralError", "TabFlowError"]
__version__ = "0.1.0"
