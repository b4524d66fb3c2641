"""Desk-scale distributed deep reinforcement learning coordination framework."""

__version__ = "0.1.0"
