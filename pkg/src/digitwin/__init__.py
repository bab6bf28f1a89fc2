"""Desk-scale digital twin: PBD rigid bodies and ropes with a Gaussian-splat correction loop."""

__version__ = "0.1.0"
