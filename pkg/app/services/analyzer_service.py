"""Critical-error localization from an error profile or a single direct prompt"""

import logging
import re
from typing import Any, Optional, Sequence

from pydantic import ValidationError

from app.config import settings
from app.exceptions import (
    CriticalStepNotFound,
    InvalidDiagnosis,
    JudgeParseFailure,
    LineFormatParseFailure,
    ParseFailure,
    PreconditionViolation,
    TaxonomyError,
)
from app.models.schemas import (
    CascadingEffect,
    ChatRequest,
    CriticalDiagnosis,
    ErrorLabel,
    ErrorProfile,
    ModuleKind,
    OTHER_ERROR,
    Trajectory,
)
from app.services.llm_client import ModelClient, complete, complete_json
from app.services.prompt_library import load_prompt
from app.services.taxonomy import parse_error_label, parse_module, render_error_definitions
from app.utils.formatting import truncate_text
from app.utils.prompts import render_template
from app.utils.sentry_utils import capture_exception_with_context

# Configure logging
logger = logging.getLogger(__name__)

NO_PRIOR_GUIDANCE = "None"

_STEP_LINE_RE = re.compile(r"^\s*step\s*:\s*(-?\d+)", re.IGNORECASE | re.MULTILINE)
_REASON_LINE_RE = re.compile(r"^\s*reason\s*:\s*(.+)$", re.IGNORECASE | re.MULTILINE)
_SUGGESTION_LINE_RE = re.compile(r"^\s*suggestion\s*:\s*(.+)$", re.IGNORECASE | re.MULTILINE)


# ============================================================================
# Trajectory rendering
# ============================================================================

def render_all_steps(trajectory: Trajectory, profile: ErrorProfile) -> str:
    """Step-by-step dump with module outputs and the detected errors of each step."""
    blocks = []
    for record in trajectory.steps:
        lines = [
            f"Step {record.index}:",
            f"  Observation: {record.observation}",
        ]
        for module, text in record.module_outputs.items():
            if module != ModuleKind.ACTION:
                lines.append(f"  {module.capitalize()}: {text}")
        lines.append(f"  Action: {record.action.describe()}")
        lines.append(f"  Environment response: {record.env_response}")

        errors = profile.errors_at(record.index)
        if errors:
            lines.append("  Detected errors:")
            for detection in errors:
                detail = f" ({detection.evidence})" if detection.evidence else ""
                lines.append(f"    - {detection.error_label}{detail}")
        else:
            lines.append("  Detected errors: none")
        blocks.append("\n".join(lines))

    blocks.append(f"Outcome: {trajectory.outcome}")
    return "\n\n".join(blocks)


def describe_trajectory(trajectory: Trajectory, zero_based: bool = False, char_limit: int = 600) -> str:
    """
    Plain transcript used by the single-prompt analyzer and the self-refine baseline.

    Args:
        trajectory: Recorded trajectory
        zero_based: Number steps from 0 instead of 1
        char_limit: Per-field cut for long observations
    """
    offset = 1 if zero_based else 0
    lines = [f"Task: {trajectory.task_description}"]
    for record in trajectory.steps:
        lines.append(f"Step {record.index - offset}:")
        lines.append(f"  Observation: {truncate_text(record.observation, char_limit)}")
        plan = record.module_outputs.get(ModuleKind.PLANNING)
        if plan:
            lines.append(f"  Plan: {truncate_text(plan, char_limit)}")
        lines.append(f"  Action: {record.action.describe()}")
        lines.append(f"  Result: {truncate_text(record.env_response, char_limit)}")
    lines.append(f"Outcome: {trajectory.outcome}")
    return "\n".join(lines)


def _format_prior_guidance(prior_guidance: Sequence[str]) -> str:
    if not prior_guidance:
        return NO_PRIOR_GUIDANCE
    return "\n".join(f"{i}. {text}" for i, text in enumerate(prior_guidance, start=1))


# ============================================================================
# Diagnosis parsing
# ============================================================================

def _critical_step(value: Any, trajectory: Trajectory) -> int:
    """Read the judge's critical_step: an int, a numeric string, or a list (earliest wins)."""
    task_id = trajectory.task_id
    if value is None or value == []:
        raise CriticalStepNotFound("Judge did not name a critical step", task_id=task_id)
    if isinstance(value, list):
        steps = [_critical_step(item, trajectory) for item in value]
        return min(steps)
    if isinstance(value, bool):
        raise InvalidDiagnosis(f"critical_step must be an integer, got {value!r}", task_id=task_id)
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, str) and value.strip().lstrip("-").isdigit():
        return int(value.strip())
    raise InvalidDiagnosis(f"critical_step must be an integer, got {value!r}", task_id=task_id)


def _cascading_effects(value: Any, task_id: str) -> tuple[CascadingEffect, ...]:
    if value is None:
        return ()
    if not isinstance(value, list):
        raise InvalidDiagnosis("cascading_effects must be a list", task_id=task_id)
    effects = []
    for item in value:
        if not isinstance(item, dict):
            raise InvalidDiagnosis(f"cascading effect {item!r} is not an object", task_id=task_id)
        try:
            effects.append(CascadingEffect(step=item.get("step"), impact=str(item.get("impact", ""))))
        except ValidationError as e:
            raise InvalidDiagnosis(f"cascading effect {item!r} is invalid: {e}", task_id=task_id) from e
    return tuple(effects)


def diagnosis_from_payload(data: Any, trajectory: Trajectory) -> CriticalDiagnosis:
    """
    Validate a judge JSON object into a CriticalDiagnosis.

    Raises:
        CriticalStepNotFound: If critical_step is null or empty
        InvalidDiagnosis: If the step is out of range, the label is unknown,
            step 1 is blamed on memory or reflection, or a cascading effect
            precedes the critical step
    """
    task_id = trajectory.task_id
    if not isinstance(data, dict):
        raise InvalidDiagnosis("Diagnosis must be a JSON object", task_id=task_id)

    step = _critical_step(data.get("critical_step"), trajectory)
    if not 1 <= step <= trajectory.length:
        raise InvalidDiagnosis(
            f"critical_step {step} is outside 1..{trajectory.length}", task_id=task_id, step=step
        )

    try:
        module = parse_module(str(data.get("critical_module", "")))
        label = parse_error_label(str(module), str(data.get("error_type", "")))
    except TaxonomyError as e:
        raise InvalidDiagnosis(f"Diagnosis label is not in the catalog: {e}", task_id=task_id, step=step) from e

    if step == 1 and module in (ModuleKind.MEMORY, ModuleKind.REFLECTION):
        raise InvalidDiagnosis(f"Step 1 has no {module} output to blame", task_id=task_id, step=step)

    effects = _cascading_effects(data.get("cascading_effects"), task_id)
    early = [effect.step for effect in effects if effect.step < step]
    if early:
        raise InvalidDiagnosis(
            f"Cascading effects at steps {early} precede critical step {step}", task_id=task_id, step=step
        )

    try:
        return CriticalDiagnosis(
            trajectory_id=task_id,
            critical_step=step,
            critical_module=module,
            error_label=label,
            root_cause=str(data.get("root_cause") or ""),
            evidence=str(data.get("evidence") or ""),
            correction_guidance=str(data.get("correction_guidance") or ""),
            cascading_effects=effects,
        )
    except ValidationError as e:
        raise InvalidDiagnosis(f"Diagnosis is inconsistent: {e}", task_id=task_id, step=step) from e


# ============================================================================
# Analyzers
# ============================================================================

async def analyze_critical(
    trajectory: Trajectory,
    profile: ErrorProfile,
    attempt_index: int,
    prior_guidance: Sequence[str],
    judge_client: ModelClient,
    judge_model_id: Optional[str] = None,
) -> CriticalDiagnosis:
    """
    Identify the earliest error that made the task unrecoverable.

    Args:
        trajectory: Failed trajectory
        profile: Detections for the same trajectory
        attempt_index: 1 for the first analysis, k for the k-th re-analysis
        prior_guidance: Guidance texts already tried, oldest first
        judge_client: Backend for the judge model
        judge_model_id: Judge model override

    Returns:
        CriticalDiagnosis with 1 <= critical_step <= trajectory length

    Raises:
        PreconditionViolation: If the trajectory succeeded
        JudgeParseFailure: If the judge reply has no JSON object
        CriticalStepNotFound: If the judge names no step
        InvalidDiagnosis: If the named step or label breaks the diagnosis rules
    """
    if trajectory.is_success:
        raise PreconditionViolation("Cannot analyze a successful trajectory", task_id=trajectory.task_id)

    logger.info("=" * 80)
    logger.info("ANALYZING CRITICAL ERROR")
    logger.info("Trajectory: %s, attempt %d", trajectory.task_id, attempt_index)
    logger.info("=" * 80)

    prompt = render_template(
        load_prompt("critical_analysis"),
        {
            "task_description": trajectory.task_description,
            "attempt_index": attempt_index,
            "prior_guidance": _format_prior_guidance(prior_guidance),
            "all_steps": render_all_steps(trajectory, profile),
            "error_reference": render_error_definitions(),
        },
    )
    request = ChatRequest.single(
        judge_model_id or settings.effective_judge_model, prompt, temperature=settings.judge_temperature
    )

    try:
        data = await complete_json(judge_client, request)
    except ParseFailure as e:
        capture_exception_with_context(e, task_id=trajectory.task_id, stage="analyze")
        raise JudgeParseFailure(f"Analyzer reply is not JSON: {e}", task_id=trajectory.task_id) from e

    diagnosis = diagnosis_from_payload(data, trajectory)
    logger.info(
        "Critical error at step %d: %s (%s)",
        diagnosis.critical_step, diagnosis.error_label, truncate_text(diagnosis.root_cause, 120),
    )
    return diagnosis


def parse_line_reply(text: str) -> tuple[int, str, str]:
    """
    Read a 'step: / reason: / suggestion:' reply.

    Returns:
        (step as written, reason, suggestion)

    Raises:
        LineFormatParseFailure: If any of the three lines is missing
    """
    step_match = _STEP_LINE_RE.search(text)
    reason_match = _REASON_LINE_RE.search(text)
    suggestion_match = _SUGGESTION_LINE_RE.search(text)
    missing = [
        name
        for name, match in (("step", step_match), ("reason", reason_match), ("suggestion", suggestion_match))
        if match is None
    ]
    if missing:
        raise LineFormatParseFailure(f"Reply is missing line(s): {', '.join(missing)}")
    return int(step_match.group(1)), reason_match.group(1).strip(), suggestion_match.group(1).strip()


async def direct_prompt_localize(
    trajectory: Trajectory,
    judge_client: ModelClient,
    judge_model_id: Optional[str] = None,
) -> CriticalDiagnosis:
    """
    Single-prompt localization without per-step detection.

    The judge sees a 0-based transcript and answers in three lines; the step
    is shifted back to 1-based and the label is always others/other.

    Raises:
        PreconditionViolation: If the trajectory succeeded
        LineFormatParseFailure: If the reply lacks a step, reason or suggestion line
        InvalidDiagnosis: If the named step is outside the trajectory
    """
    if trajectory.is_success:
        raise PreconditionViolation("Cannot analyze a successful trajectory", task_id=trajectory.task_id)

    prompt = render_template(
        load_prompt("vanilla_debug"), {"trajectory": describe_trajectory(trajectory, zero_based=True)}
    )
    request = ChatRequest.single(
        judge_model_id or settings.effective_judge_model, prompt, temperature=settings.judge_temperature
    )
    completion = await complete(judge_client, request)

    try:
        written_step, reason, suggestion = parse_line_reply(completion.text)
    except LineFormatParseFailure as e:
        raise LineFormatParseFailure(str(e), task_id=trajectory.task_id) from e

    step = written_step + 1
    if not 1 <= step <= trajectory.length:
        raise InvalidDiagnosis(
            f"Reply names step {written_step} but the transcript has steps 0..{trajectory.length - 1}",
            task_id=trajectory.task_id,
        )

    logger.info("Direct localization of %s: step %d", trajectory.task_id, step)
    return CriticalDiagnosis(
        trajectory_id=trajectory.task_id,
        critical_step=step,
        critical_module=ModuleKind.OTHERS,
        error_label=ErrorLabel(module=ModuleKind.OTHERS, error_type=OTHER_ERROR),
        root_cause=reason,
        correction_guidance=suggestion,
    )
