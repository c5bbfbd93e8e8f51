"""Bayesian hierarchical model for effort-corrected first-arrival dates of migratory birds."""

__version__ = "0.1.0"
