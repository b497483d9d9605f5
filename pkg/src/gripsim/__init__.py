"""Batched intersection-free implicit-FEM grasp simulation engine."""

__version__ = "0.1.0"
