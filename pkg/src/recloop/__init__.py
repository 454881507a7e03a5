"""Seedable simulation of recommender-system feedback loops."""

__version__ = "0.1.0"
