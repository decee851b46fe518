"""Trajectory-tracking NMPC for road vehicles with corridor-based avoidance."""

__version__ = "0.1.0"
