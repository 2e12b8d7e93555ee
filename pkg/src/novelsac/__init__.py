"""Novelty-constrained soft actor-critic policy libraries with backtracking recovery."""

__version__ = "0.1.0"
