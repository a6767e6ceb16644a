"""Skyway: corridor-observation reinforcement learning for B-spline flight planning."""

__version__ = "0.1.0"
