"""Student-t mixture variational autoencoder.

A self-contained implementation: reverse-mode autodiff over a dynamic
graph, gamma-family special functions as differentiable primitives,
Student-t mixture posterior mathematics, encoder/decoder networks, the
mixture evidence lower bound, a full training loop, synthetic benchmarks,
and a command-line interface.
"""

__version__ = "0.1.0"

from .errors import (
    ContractViolation,
    DomainError,
    NumericFault,
    TvaeError,
    ValidationError,
)

__all__ = [
    "ContractViolation",
    "DomainError",
    "NumericFault",
    "TvaeError",
    "ValidationError",
    "__version__",
]
