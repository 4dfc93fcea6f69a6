"""Targeted transfer attacks by matching random crops in an encoder ensemble's embedding space."""

__version__ = "0.1.0"
