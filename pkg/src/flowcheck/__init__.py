"""Fluid model checking of single-clock timed properties of an agent in a large population."""

__version__ = "0.1.0"
