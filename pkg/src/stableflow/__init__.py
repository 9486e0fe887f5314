"""Stable flow-based impedance control.

A spring-damper regulator pulled back through a learned bijection keeps
its stability and passivity properties for free; this package implements
the bijection (stacked affine coupling layers with exact Jacobians and
parameter gradients), the resulting control law and its energy function,
simulation plants including a contact-rich 2D block-insertion task, a
from-scratch clipped-surrogate policy-gradient trainer, and numerical
certification of the stability claims.
"""

from .errors import (
    ConfigError,
    DivergenceError,
    NumericError,
    ShapeError,
    StableFlowError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DivergenceError",
    "NumericError",
    "ShapeError",
    "StableFlowError",
    "__version__",
]
