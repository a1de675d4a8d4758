"""Trajectory generation, safety filtering, learned scoring, and closed-loop
evaluation for a lane-following planner."""

__version__ = "0.1.0"
