"""Adaptive boundary control of a transport PDE with recirculation, with an
optional neural surrogate for the backstepping gain kernel."""

__version__ = "0.1.0"
