"""Factorized training of Gaussian mixtures and MLPs over normalized relations."""

__version__ = "0.1.0"
