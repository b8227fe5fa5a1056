"""Per-step, per-module error detection with an LLM judge"""

import logging
from typing import Optional

from app.config import settings
from app.exceptions import JudgeParseFailure, ParseFailure, PreconditionViolation
from app.models.schemas import (
    ChatRequest,
    ErrorDetection,
    ErrorLabel,
    ErrorProfile,
    HaltReason,
    ModuleKind,
    NO_ERROR,
    OutcomeStatus,
    Trajectory,
    modules_for_step,
)
from app.services.llm_client import ModelClient, complete_json
from app.services.prompt_library import load_prompt
from app.services.rollout_service import build_step_prompt, config_for_trajectory
from app.services.taxonomy import parse_error_label, render_error_definitions
from app.services.trajectory_service import validate
from app.utils.prompts import render_template
from app.utils.sentry_utils import capture_exception_with_context

# Configure logging
logger = logging.getLogger(__name__)

NO_MODULE_CONTENT = "No content found for this module"
NO_ENV_RESPONSE = "No response"


def _step_context(trajectory: Trajectory, step: int) -> str:
    """The prompt the agent saw at `step`, rebuilt from the recorded history."""
    record = trajectory.step(step)
    return build_step_prompt(
        config_for_trajectory(trajectory),
        trajectory.task_description,
        trajectory.steps[: step - 1],
        record.observation,
        record.admissible_actions,
        trajectory.feedback_applied,
    )


def _as_text(value) -> str:
    if value is None:
        return ""
    return value if isinstance(value, str) else str(value)


async def detect_step_errors(
    trajectory: Trajectory,
    step: int,
    module: ModuleKind,
    judge_client: ModelClient,
    judge_model_id: Optional[str] = None,
) -> ErrorDetection:
    """
    Ask the judge whether one module of one step contains an error.

    Args:
        trajectory: Finished trajectory
        step: 1-based step index
        module: Reasoning module to judge (not system)
        judge_client: Backend for the judge model
        judge_model_id: Judge model; defaults to the configured judge

    Returns:
        ErrorDetection whose label lies in the catalog

    Raises:
        PreconditionViolation: If the step or module is not part of the trajectory
        JudgeParseFailure: If the judge never returns a usable JSON object
        UnknownErrorType: If the judge names an error type outside the catalog
    """
    if not 1 <= step <= trajectory.length:
        raise PreconditionViolation(
            f"Step {step} is outside 1..{trajectory.length}", task_id=trajectory.task_id, step=step
        )
    if module not in modules_for_step(trajectory.strategy, step):
        raise PreconditionViolation(
            f"Module {module} is not emitted at step {step} under {trajectory.strategy}",
            task_id=trajectory.task_id,
            step=step,
        )

    record = trajectory.step(step)
    prompt = render_template(
        load_prompt("detector"),
        {
            "task_description": trajectory.task_description,
            "environment": trajectory.env_name,
            "step_num": step,
            "context": _step_context(trajectory, step),
            "module_name": str(module),
            "module_content": record.module_outputs.get(module) or NO_MODULE_CONTENT,
            "env_response": record.env_response or NO_ENV_RESPONSE,
            "error_definitions": render_error_definitions(module),
        },
    )
    request = ChatRequest.single(
        judge_model_id or settings.effective_judge_model, prompt, temperature=settings.judge_temperature
    )

    try:
        data = await complete_json(judge_client, request)
    except ParseFailure as e:
        capture_exception_with_context(e, task_id=trajectory.task_id, stage="detect", step=step)
        raise JudgeParseFailure(
            f"Detector reply for step {step} {module} is not JSON: {e}",
            task_id=trajectory.task_id,
            step=step,
        ) from e

    if not isinstance(data, dict) or not isinstance(data.get("error_type"), str):
        raise JudgeParseFailure(
            f"Detector reply for step {step} {module} has no error_type string",
            task_id=trajectory.task_id,
            step=step,
        )

    label = parse_error_label(str(module), data["error_type"])
    flag = data.get("error_detected")
    if isinstance(flag, bool) and flag != label.is_error:
        logger.warning(
            "Judge flag %s disagrees with label %s at step %d; using the label",
            flag, label, step,
        )

    return ErrorDetection(
        step=step,
        module=module,
        error_detected=label.is_error,
        error_label=label,
        evidence=_as_text(data.get("evidence")),
        reasoning=_as_text(data.get("reasoning")),
    )


def system_detection(trajectory: Trajectory, step: int) -> ErrorDetection:
    """
    System-module verdict taken from the recorded outcome, not from the judge.

    Only the last step of a halted episode carries an error, labelled with
    the halt reason.
    """
    outcome = trajectory.outcome
    if (
        step == trajectory.length
        and outcome is not None
        and outcome.status == OutcomeStatus.SYSTEM_HALT
    ):
        reason: HaltReason = outcome.reason
        return ErrorDetection(
            step=step,
            module=ModuleKind.SYSTEM,
            error_detected=True,
            error_label=ErrorLabel(module=ModuleKind.SYSTEM, error_type=str(reason)),
            evidence=f"Episode halted with {reason} after step {step}",
        )
    return ErrorDetection(
        step=step,
        module=ModuleKind.SYSTEM,
        error_detected=False,
        error_label=ErrorLabel(module=ModuleKind.SYSTEM, error_type=NO_ERROR),
    )


async def detect_all(
    trajectory: Trajectory,
    judge_client: ModelClient,
    judge_model_id: Optional[str] = None,
) -> ErrorProfile:
    """
    Judge every (step, module) pair the trajectory emits, plus system per step.

    Args:
        trajectory: Finished, valid trajectory
        judge_client: Backend for the judge model
        judge_model_id: Judge model override

    Returns:
        ErrorProfile ordered by step, then module

    Raises:
        PreconditionViolation: If the trajectory is unfinished or invalid
    """
    if trajectory.outcome is None:
        raise PreconditionViolation("Cannot judge an unfinished trajectory", task_id=trajectory.task_id)
    violations = validate(trajectory)
    if violations:
        raise PreconditionViolation(
            f"Trajectory violates its invariants: {', '.join(str(v) for v in violations)}",
            task_id=trajectory.task_id,
        )

    logger.info("=" * 80)
    logger.info("DETECTING ERRORS")
    logger.info("Trajectory: %s (%d steps, %s)", trajectory.task_id, trajectory.length, trajectory.strategy)
    logger.info("=" * 80)

    detections: list[ErrorDetection] = []
    for step in range(1, trajectory.length + 1):
        for module in modules_for_step(trajectory.strategy, step):
            detection = await detect_step_errors(trajectory, step, module, judge_client, judge_model_id)
            if detection.error_detected:
                logger.info("Step %d %s: %s", step, module, detection.error_label)
            detections.append(detection)
        detections.append(system_detection(trajectory, step))

    profile = ErrorProfile(trajectory_id=trajectory.task_id, detections=tuple(detections))
    logger.info(
        "Detected %d errors across %d judgments",
        sum(d.error_detected for d in detections), len(detections),
    )
    return profile
