"""Rigid body in a bounded viscous fluid with Navier slip coupling."""

__version__ = "0.1.0"
