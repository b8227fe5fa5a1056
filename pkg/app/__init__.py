"""Trajectory Debugger - agent rollout, error localization and re-rollout toolkit"""

__version__ = "1.0.0"
