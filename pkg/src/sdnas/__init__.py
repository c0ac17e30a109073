"""Desk-scale lab for self-distilled differentiable architecture search."""

__version__ = "0.1.0"
