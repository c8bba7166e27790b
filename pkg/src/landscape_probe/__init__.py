"""Dimension-expanded inputs, iterative attacks and the geometry between them, on a numpy autodiff core."""

from .sbde import ExpansionSpec, FillScheme, expand, extract, project

__version__ = "0.1.0"

__all__ = ["ExpansionSpec", "FillScheme", "expand", "extract", "project", "__version__"]
