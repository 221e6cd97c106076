"""Quantum trajectories as characteristic curves of 1-D Madelung-type field equations."""

__version__ = "0.1.0"

from .errors import (AllNodes, GridMismatch, InsufficientHistory, NodeCrossing, ParseError,
                     QuantrajError, SeedUndefined, SolverDiverged, UndefinedRegion,
                     ValidationError)
from .fields import (ComplexField, Constants, KGState, PolarField, SpinorField, UniformGrid,
                     polar_decompose, recompose)

__all__ = ["AllNodes", "ComplexField", "Constants", "GridMismatch", "InsufficientHistory",
           "KGState", "NodeCrossing", "ParseError", "PolarField", "QuantrajError",
           "SeedUndefined", "SolverDiverged", "SpinorField", "UndefinedRegion", "UniformGrid",
           "ValidationError", "polar_decompose", "recompose"]
