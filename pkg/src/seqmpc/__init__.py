"""Sequence-model-guided sequential convex programming and MPC."""

__version__ = "0.1.0"
