"""Desk-scale vision-language model with a from-scratch autodiff substrate."""

__version__ = "0.1.0"
