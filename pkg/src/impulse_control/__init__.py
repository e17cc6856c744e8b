"""Impulse control of Markov chains via minimal superharmonic functions."""

__version__ = "0.1.0"
