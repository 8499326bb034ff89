"""Differentiable ranking and visual attribution at desk scale."""

__version__ = "0.1.0"

from . import diffcore, models, pertmetrics, softobjective, softperm, synthdata

__all__ = ["diffcore", "softperm", "pertmetrics", "softobjective", "models", "synthdata", "__version__"]
