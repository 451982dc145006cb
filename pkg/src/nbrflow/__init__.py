"""Neighbour-conditioned normalizing flows."""

__version__ = "0.1.0"
