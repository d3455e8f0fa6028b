"""Generating functions for contact Hamiltonian isotopies of the zero section in ``J^1 R^n``."""

from .contact import ContactPoint, TangentVector
from .flow import FlowError, FlowSpec
from .genfun import CutoffParams, FiberPoint, Partition
from .hamlang import ExpressionError, HamiltonianExpr, compactify, parse

__version__ = "0.1.0"

__all__ = [
    "ContactPoint",
    "TangentVector",
    "FlowError",
    "FlowSpec",
    "CutoffParams",
    "FiberPoint",
    "Partition",
    "ExpressionError",
    "HamiltonianExpr",
    "compactify",
    "parse",
]
