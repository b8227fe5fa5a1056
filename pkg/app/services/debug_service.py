"""Iterative debugging: detect, localize, feed back and re-roll from the critical step"""

import logging
from typing import Literal, Optional

from app.config import settings
from app.exceptions import CriticalStepNotFound, PreconditionViolation
from app.models.schemas import (
    CriticalDiagnosis,
    DebugAttempt,
    DebugResult,
    Feedback,
    RolloutConfig,
    TokenUsage,
    Trajectory,
)
from app.services.analyzer_service import analyze_critical, direct_prompt_localize
from app.services.detector_service import detect_all
from app.services.environment import EnvFactory
from app.services.llm_client import ModelClient
from app.services.rollout_service import config_for_trajectory, out_of_tokens, run_rollout
from app.services.trajectory_service import truncate_before
from app.utils.sentry_utils import capture_exception_with_context

# Configure logging
logger = logging.getLogger(__name__)

AnalyzerKind = Literal["profile", "direct"]


class _UsageMeter:
    """Token usage spent by one or two clients since construction."""

    def __init__(self, *clients: ModelClient):
        unique: list[ModelClient] = []
        for client in clients:
            if all(client is not seen for seen in unique):
                unique.append(client)
        self._start = [(client, client.usage_report()) for client in unique]

    def spent(self) -> TokenUsage:
        total = TokenUsage.zero()
        for client, start in self._start:
            total = total + (client.usage_report() - start)
        return total


async def _diagnose(
    trajectory: Trajectory,
    judge_client: ModelClient,
    analyzer: AnalyzerKind,
    attempt_index: int,
    prior_guidance: tuple[str, ...],
) -> CriticalDiagnosis:
    if analyzer == "direct":
        return await direct_prompt_localize(trajectory, judge_client)
    profile = await detect_all(trajectory, judge_client)
    return await analyze_critical(trajectory, profile, attempt_index, prior_guidance, judge_client)


def _guidance(diagnosis: CriticalDiagnosis) -> str:
    return diagnosis.correction_guidance or diagnosis.root_cause


async def update_feedback(
    previous: Feedback,
    failed_trajectory: Trajectory,
    judge_client: ModelClient,
    analyzer: AnalyzerKind = "profile",
) -> Feedback:
    """
    Re-analyze a failed re-rollout and produce the next feedback.

    The new target never moves past the previous one, and the previous
    guidance is appended to the history the judge sees.

    Raises:
        PreconditionViolation: If the re-rollout succeeded
    """
    if failed_trajectory.is_success:
        raise PreconditionViolation(
            "Feedback is only updated after a failed attempt", task_id=failed_trajectory.task_id
        )

    attempt_index = previous.attempt_index + 1
    prior = previous.prior_guidance + (previous.guidance,)
    diagnosis = await _diagnose(failed_trajectory, judge_client, analyzer, attempt_index, prior)

    target = min(diagnosis.critical_step, previous.target_step)
    logger.info(
        "Attempt %d feedback targets step %d (analyzer said %d, previous %d)",
        attempt_index, target, diagnosis.critical_step, previous.target_step,
    )
    return Feedback(
        target_step=target,
        error_label=diagnosis.error_label,
        guidance=_guidance(diagnosis),
        attempt_index=attempt_index,
        prior_guidance=prior,
    )


async def debug_loop(
    initial: Trajectory,
    env_factory: EnvFactory,
    judge_client: ModelClient,
    agent_client: ModelClient,
    budget: Optional[int] = None,
    analyzer: AnalyzerKind = "profile",
    config: Optional[RolloutConfig] = None,
) -> DebugResult:
    """
    Localize the critical error and re-roll from it until success or budget.

    Every attempt replays the initial trajectory up to the step before the
    feedback target, then hands control back to the agent with the feedback
    injected into its prompts.

    Args:
        initial: Finished trajectory to debug
        env_factory: Fresh environments for the same task
        judge_client: Backend for detection and analysis
        agent_client: Backend for the agent policy
        budget: Maximum re-rollouts; defaults to settings.debug_budget
        analyzer: "profile" (detect + analyze) or "direct" (single prompt)
        config: Agent rollout settings; derived from the trajectory when omitted

    Returns:
        DebugResult; attempts is empty when the initial run already succeeded

    Raises:
        PreconditionViolation: If budget < 1
        JudgeParseFailure, InvalidDiagnosis, LineFormatParseFailure: From the analyzer
        ReplayDivergence: If the environment no longer reproduces the prefix
    """
    budget = settings.debug_budget if budget is None else budget
    method = "debug" if analyzer == "profile" else "direct_debug"
    if budget < 1:
        raise PreconditionViolation(f"Debug budget must be at least 1, got {budget}", task_id=initial.task_id)

    if initial.is_success:
        logger.info("Trajectory %s already succeeded; nothing to debug", initial.task_id)
        return DebugResult(method=method, initial=initial, final_outcome=initial.outcome)

    config = config or config_for_trajectory(initial)
    meter = _UsageMeter(judge_client, agent_client)

    logger.info("=" * 80)
    logger.info("DEBUG LOOP STARTED")
    logger.info("Task: %s", initial.task_id)
    logger.info("Analyzer: %s, budget: %d", analyzer, budget)
    logger.info("=" * 80)

    try:
        diagnosis = await _diagnose(initial, judge_client, analyzer, 1, ())
    except CriticalStepNotFound as e:
        logger.warning("No critical step found for %s: %s", initial.task_id, e)
        return DebugResult(
            method=method, initial=initial, final_outcome=initial.outcome, total_usage=meter.spent()
        )
    except Exception as e:
        capture_exception_with_context(e, task_id=initial.task_id, stage="debug")
        raise

    feedback = Feedback(
        target_step=diagnosis.critical_step,
        error_label=diagnosis.error_label,
        guidance=_guidance(diagnosis),
        attempt_index=1,
    )

    attempts: list[DebugAttempt] = []
    for k in range(1, budget + 1):
        prefix = truncate_before(initial, feedback.target_step)
        trajectory = await run_rollout(config, env_factory(), agent_client, prefix, feedback)
        attempts.append(DebugAttempt(feedback=feedback, trajectory=trajectory))
        logger.info("Attempt %d/%d from step %d: %s", k, budget, feedback.target_step, trajectory.outcome)

        if trajectory.is_success or k == budget:
            break
        if out_of_tokens(trajectory, agent_client):
            logger.warning("Agent out of tokens after attempt %d", k)
            break
        try:
            feedback = await update_feedback(feedback, trajectory, judge_client, analyzer)
        except CriticalStepNotFound as e:
            logger.warning("Re-analysis of attempt %d found no critical step: %s", k, e)
            break

    final = attempts[-1].trajectory.outcome
    logger.info("=" * 80)
    logger.info("DEBUG LOOP FINISHED: %s after %d attempt(s)", final, len(attempts))
    logger.info("=" * 80)

    return DebugResult(
        method=method,
        initial=initial,
        diagnosis=diagnosis,
        attempts=tuple(attempts),
        final_outcome=final,
        total_usage=meter.spent(),
    )
