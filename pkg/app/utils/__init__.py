"""Utility functions for prompt rendering, parsing and display"""

from app.utils.sentry_utils import capture_exception_with_context

__all__ = ["capture_exception_with_context"]
