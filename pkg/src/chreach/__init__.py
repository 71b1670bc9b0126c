"""Convex-hull reachability for disturbed nonlinear ODEs via extremal state-costate trajectories."""

__version__ = "0.1.0"
