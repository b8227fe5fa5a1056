"""Sentry utility functions for error tracking with pipeline context"""

from typing import Optional

import sentry_sdk

from app.exceptions import DebuggerError


def capture_exception_with_context(
    exception: Exception,
    task_id: Optional[str] = None,
    stage: Optional[str] = None,
    **extra_tags
) -> None:
    """
    Capture an exception to Sentry tagged with the task and pipeline stage.

    Task id and step are read from the exception itself when it is a
    DebuggerError and not given explicitly. Without an initialised Sentry
    client this is a no-op.

    Args:
        exception: The exception to capture
        task_id: Optional task id override
        stage: Pipeline stage such as "rollout", "detect" or "debug"
        **extra_tags: Additional tags to include in the Sentry event

    Usage:
        capture_exception_with_context(e, task_id=trajectory.task_id, stage="analyze")
        capture_exception_with_context(e, stage="gateway", backend="live")
    """
    step = None
    if isinstance(exception, DebuggerError):
        if task_id is None:
            task_id = exception.task_id
        step = exception.step

    with sentry_sdk.push_scope() as scope:
        if task_id:
            scope.set_tag("task_id", task_id)
        if stage:
            scope.set_tag("stage", stage)
        if step is not None:
            scope.set_tag("step", step)

        for key, value in extra_tags.items():
            scope.set_tag(key, value)

        sentry_sdk.capture_exception(exception)
