"""Figure rendering for the quoting-desk CLI's CSV artifacts."""

from .cli import FigureSpec, SchemaError, render, main

__all__ = ["FigureSpec", "SchemaError", "render", "main"]
