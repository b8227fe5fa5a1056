"""Trajectory building, slicing, serialization and invariant checking"""

import json
import logging
from typing import Any, Optional

from pydantic import ValidationError

from app.exceptions import (
    IndexGap,
    ModuleRuleViolation,
    OutOfRange,
    SchemaViolation,
    TrajectoryError,
    TrajectoryFinalized,
)
from app.models.schemas import (
    STRATEGY_MODULES,
    Feedback,
    HaltReason,
    ModuleKind,
    Outcome,
    OutcomeStatus,
    StepRecord,
    Trajectory,
    TrajectoryPrefix,
    Violation,
)
from app.utils.action_parser import canonicalize, parse_agent_completion

# Configure logging
logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

_FIRST_STEP_FORBIDDEN = (ModuleKind.MEMORY, ModuleKind.REFLECTION)


def append_step(trajectory: Trajectory, record: StepRecord) -> Trajectory:
    """
    Return the trajectory with one more step.

    Args:
        trajectory: Trajectory under construction (no outcome yet)
        record: Step whose index continues the trajectory

    Returns:
        New trajectory value; the input is unchanged

    Raises:
        TrajectoryFinalized: If the trajectory already has an outcome
        IndexGap: If record.index is not length + 1
        ModuleRuleViolation: If the step carries modules it may not have
    """
    context = {"task_id": trajectory.task_id, "step": record.index}
    if trajectory.outcome is not None:
        raise TrajectoryFinalized(
            f"Trajectory {trajectory.task_id} is finished ({trajectory.outcome})", **context
        )

    expected = trajectory.length + 1
    if record.index != expected:
        raise IndexGap(f"Step index {record.index} does not continue at {expected}", **context)

    keys = set(record.module_outputs)
    if record.index == 1 and keys & set(_FIRST_STEP_FORBIDDEN):
        raise ModuleRuleViolation("Step 1 cannot carry memory or reflection output", **context)

    allowed = set(STRATEGY_MODULES[trajectory.strategy])
    if not keys <= allowed:
        extra = ", ".join(sorted(str(k) for k in keys - allowed))
        raise ModuleRuleViolation(
            f"Strategy {trajectory.strategy} does not emit: {extra}", **context
        )

    return trajectory.model_copy(update={"steps": trajectory.steps + (record,)})


def finalize(trajectory: Trajectory, outcome: Outcome) -> Trajectory:
    """Attach the outcome, checking the step-limit rule."""
    if trajectory.outcome is not None:
        raise TrajectoryFinalized(
            f"Trajectory {trajectory.task_id} is already finished", task_id=trajectory.task_id
        )
    if (
        outcome.reason == HaltReason.STEP_LIMIT
        and trajectory.step_cap is not None
        and trajectory.length != trajectory.step_cap
    ):
        raise TrajectoryError(
            f"step_limit halt after {trajectory.length} steps but cap is {trajectory.step_cap}",
            task_id=trajectory.task_id,
        )
    return trajectory.model_copy(update={"outcome": outcome})


def truncate_before(trajectory: Trajectory, t: int) -> TrajectoryPrefix:
    """
    Steps with index < t plus the task metadata.

    Raises:
        OutOfRange: Unless 1 <= t <= T + 1
    """
    if not 1 <= t <= trajectory.length + 1:
        raise OutOfRange(
            f"Cut point {t} outside 1..{trajectory.length + 1}",
            task_id=trajectory.task_id,
            step=t,
        )
    return TrajectoryPrefix(
        task_id=trajectory.task_id,
        env_name=trajectory.env_name,
        task_description=trajectory.task_description,
        strategy=trajectory.strategy,
        model_id=trajectory.model_id,
        seed=trajectory.seed,
        step_cap=trajectory.step_cap,
        steps=trajectory.steps[: t - 1],
    )


def from_prefix(
    prefix: TrajectoryPrefix,
    feedback: Optional[Feedback] = None,
    model_id: Optional[str] = None,
    step_cap: Optional[int] = None,
) -> Trajectory:
    """Open a trajectory under construction that starts with the prefix steps."""
    return Trajectory(
        schema_version=SCHEMA_VERSION,
        task_id=prefix.task_id,
        env_name=prefix.env_name,
        task_description=prefix.task_description,
        strategy=prefix.strategy,
        model_id=model_id or prefix.model_id,
        seed=prefix.seed,
        step_cap=step_cap or prefix.step_cap,
        steps=prefix.steps,
        outcome=None,
        feedback_applied=feedback,
    )


def serialize(trajectory: Trajectory) -> str:
    """
    Canonical pretty-printed JSON (UTF-8, LF line endings, trailing newline).

    Raises:
        TrajectoryError: If the trajectory has no outcome yet
    """
    if trajectory.outcome is None:
        raise TrajectoryError(
            f"Cannot serialize unfinished trajectory {trajectory.task_id}",
            task_id=trajectory.task_id,
        )
    return trajectory.model_dump_json(indent=2) + "\n"


def _schema_path(error: ValidationError) -> tuple[str, str]:
    first = error.errors()[0]
    path = ".".join(str(part) for part in first["loc"]) or "$"
    return path, first["msg"]


def deserialize(text: str) -> Trajectory:
    """
    Parse trajectory JSON (schema v1).

    Raises:
        SchemaViolation: With the offending field path
    """
    try:
        data = json.loads(text)
    except ValueError as e:
        raise SchemaViolation("$", f"not valid JSON: {e}") from e
    return trajectory_from_data(data)


def trajectory_from_data(data: Any) -> Trajectory:
    """
    Validate an already-decoded trajectory document.

    Raises:
        SchemaViolation: With the offending field path
    """
    if not isinstance(data, dict):
        raise SchemaViolation("$", "expected a JSON object")

    if "schema_version" not in data:
        raise SchemaViolation("schema_version", "field required")
    if data["schema_version"] != SCHEMA_VERSION:
        raise SchemaViolation(
            "schema_version", f"unsupported version {data['schema_version']!r}"
        )
    if data.get("outcome") is None:
        raise SchemaViolation("outcome", "field required", task_id=data.get("task_id"))

    try:
        return Trajectory.model_validate(data)
    except ValidationError as e:
        path, message = _schema_path(e)
        raise SchemaViolation(path, message, task_id=data.get("task_id")) from e


def _reparse_agrees(trajectory: Trajectory, record: StepRecord) -> bool:
    outputs, action = parse_agent_completion(record.raw_completion, trajectory.strategy, record.index)
    action = canonicalize(action, record.admissible_actions)
    return outputs == record.module_outputs and action == record.action


def validate(trajectory: Trajectory) -> list[Violation]:
    """
    Check every trajectory invariant.

    Returns:
        Violations naming step and rule; empty when the trajectory is well formed
    """
    violations: list[Violation] = []
    allowed = set(STRATEGY_MODULES[trajectory.strategy])

    previous = 0
    for record in trajectory.steps:
        if record.index != previous + 1:
            violations.append(Violation(
                step=record.index,
                rule="IndexGap",
                message=f"expected index {previous + 1}",
            ))
        previous = record.index

        keys = set(record.module_outputs)
        if record.index == 1 and keys & set(_FIRST_STEP_FORBIDDEN):
            violations.append(Violation(
                step=record.index,
                rule="ModuleRuleViolation",
                message="step 1 carries memory or reflection output",
            ))
        if not keys <= allowed:
            violations.append(Violation(
                step=record.index,
                rule="ModuleSetViolation",
                message=f"modules outside strategy {trajectory.strategy}",
            ))
        if record.raw_completion and not _reparse_agrees(trajectory, record):
            violations.append(Violation(
                step=record.index,
                rule="ActionReparseMismatch",
                message="raw completion does not re-parse to the stored outputs",
            ))

    outcome = trajectory.outcome
    if trajectory.step_cap is not None:
        if trajectory.length > trajectory.step_cap:
            violations.append(Violation(
                rule="StepCapMismatch",
                message=f"{trajectory.length} steps exceed cap {trajectory.step_cap}",
            ))
        elif (
            outcome is not None
            and outcome.status == OutcomeStatus.SYSTEM_HALT
            and outcome.reason == HaltReason.STEP_LIMIT
            and trajectory.length != trajectory.step_cap
        ):
            violations.append(Violation(
                rule="StepCapMismatch",
                message=f"step_limit after {trajectory.length} steps, cap {trajectory.step_cap}",
            ))

    if violations:
        logger.debug("Trajectory %s has %d violations", trajectory.task_id, len(violations))
    return violations
