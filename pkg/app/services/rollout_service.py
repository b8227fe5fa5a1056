"""Agent episode loop: prompt, complete, parse, act, record"""

import asyncio
import logging
from typing import Optional, Sequence

from app.config import settings
from app.exceptions import ModelUnavailableError, PreconditionViolation
from app.models.schemas import (
    ActionResult,
    CanonicalAction,
    ChatRequest,
    Feedback,
    HaltReason,
    ModuleKind,
    Outcome,
    RolloutConfig,
    StepRecord,
    TokenUsage,
    Trajectory,
    TrajectoryPrefix,
    modules_for_step,
)
from app.services.environment import EnvFactory, Environment
from app.services.llm_client import ModelClient
from app.services.prompt_library import FEEDBACK_SLOT, load_template_set, template_set_for
from app.services.trajectory_service import SCHEMA_VERSION, append_step, finalize, from_prefix
from app.utils.action_parser import canonicalize, parse_agent_completion, render_action_tag
from app.utils.formatting import format_action_list, truncate_text
from app.utils.prompts import render_template
from app.utils.sentry_utils import capture_exception_with_context

# Configure logging
logger = logging.getLogger(__name__)

FEEDBACK_HEADER = "DEBUG FEEDBACK (must follow):"


def format_action_history(steps: Sequence[StepRecord], window: int, obs_char_limit: int = 300) -> str:
    """
    One line per step for the last `window` steps, oldest first.

    Observations and responses longer than `obs_char_limit` are cut with an
    elision marker. No steps give an empty string.
    """
    if window < 1 or not steps:
        return ""
    lines = []
    for step in steps[-window:]:
        lines.append(
            f"Step {step.index} — Observation: {truncate_text(step.observation, obs_char_limit)}; "
            f"Action: {step.action.describe()}; "
            f"Result: {truncate_text(step.env_response, obs_char_limit)}"
        )
    return "\n".join(lines)


def format_feedback_block(feedback: Feedback) -> str:
    lines = [
        FEEDBACK_HEADER,
        f"- Critical step: {feedback.target_step}",
        f"- Error type: {feedback.error_label}",
        f"- Guidance: {feedback.guidance}",
    ]
    if feedback.prior_guidance:
        lines.append("- Earlier guidance that did not succeed:")
        lines.extend(f"  {i}. {text}" for i, text in enumerate(feedback.prior_guidance, start=1))
    return "\n".join(lines)


def build_step_prompt(
    config: RolloutConfig,
    task_description: str,
    history: Sequence[StepRecord],
    current_observation: str,
    admissible_actions: Optional[Sequence[str]],
    feedback: Optional[Feedback] = None,
) -> str:
    """
    Render the agent prompt for the next step.

    Step 1 uses the no-history variant. Later steps use the history variant
    with a window of the last `config.history_window` steps, or the
    full-history final-step variant when enabled and the template set has
    one. Feedback is inserted from its target step onward.

    Args:
        config: Rollout settings (strategy, window, template set)
        task_description: Task text
        history: Steps taken so far
        current_observation: Observation before this step
        admissible_actions: Legal actions, if the environment lists them
        feedback: Debug guidance for re-rollouts

    Returns:
        Rendered prompt text

    Raises:
        MissingPlaceholder: If the template set needs a binding not produced here
    """
    template_set = load_template_set(config.template_set)
    current_step = len(history) + 1
    step_count = len(history)

    if current_step == 1:
        variant = "no_history"
        window = 0
    elif (
        config.full_history_last_step
        and current_step == config.step_cap
        and "last_step" in template_set.variants
    ):
        variant = "last_step"
        window = step_count
    else:
        variant = "history"
        window = min(config.history_window, step_count)

    with_feedback = feedback is not None and current_step >= feedback.target_step
    template = template_set.compose(
        variant,
        modules_for_step(config.strategy, current_step),
        with_feedback=with_feedback,
    )

    candidates = {
        "task_description": task_description,
        "current_observation": current_observation,
        "step_count": step_count,
        "history_length": window,
        "action_history": format_action_history(history, window, config.obs_char_limit),
        "current_step": current_step,
        template_set.action_binding: format_action_list(admissible_actions),
    }
    declared = template_set.variants[variant].placeholders
    bindings = {name: value for name, value in candidates.items() if name in declared}
    if with_feedback:
        bindings[FEEDBACK_SLOT] = format_feedback_block(feedback)
    return render_template(template, bindings)


def apply_step(
    env: Environment,
    trajectory: Trajectory,
    before: ActionResult,
    action: CanonicalAction,
    raw_completion: str = "",
    module_outputs: Optional[dict[ModuleKind, str]] = None,
    usage: Optional[TokenUsage] = None,
) -> tuple[Trajectory, Optional[ActionResult]]:
    """
    Execute one action and record the step.

    Returns:
        (trajectory, result); result is None when the environment failed and
        the trajectory was finalized as environment_error
    """
    step_index = trajectory.length + 1
    try:
        result = env.step(action)
    except Exception as e:
        logger.error("Environment failed at step %d of %s: %s", step_index, trajectory.task_id, e)
        capture_exception_with_context(e, task_id=trajectory.task_id, stage="rollout", step=step_index)
        return finalize(trajectory, Outcome.halted(HaltReason.ENVIRONMENT_ERROR)), None

    record = StepRecord(
        index=step_index,
        observation=before.observation,
        admissible_actions=before.admissible_actions,
        module_outputs=module_outputs or {},
        action=action,
        env_response=result.observation,
        raw_completion=raw_completion,
        token_usage=usage or TokenUsage.zero(),
    )
    return append_step(trajectory, record), result


def forced_step(
    env: Environment,
    trajectory: Trajectory,
    before: ActionResult,
    action: CanonicalAction,
) -> tuple[Trajectory, Optional[ActionResult]]:
    """Record an action chosen outside the agent policy as an <action> completion."""
    raw = render_action_tag(action)
    outputs, _ = parse_agent_completion(raw, trajectory.strategy, trajectory.length + 1)
    return apply_step(env, trajectory, before, action, raw, outputs)


def config_for_trajectory(trajectory: Trajectory, **overrides) -> RolloutConfig:
    """Rollout settings that reproduce how a recorded trajectory was run."""
    values = {
        "strategy": trajectory.strategy,
        "model_id": trajectory.model_id,
        "template_set": template_set_for(trajectory.env_name),
        "history_window": settings.history_window,
        "obs_char_limit": settings.history_obs_char_limit,
        "step_cap": trajectory.step_cap or max(trajectory.length, 1),
        "temperature": settings.agent_temperature,
    }
    values.update({key: value for key, value in overrides.items() if value is not None})
    return RolloutConfig(**values)


def out_of_tokens(trajectory: Trajectory, client: ModelClient) -> bool:
    """True when the client refused a call under its budget or the run halted on the model limit."""
    return client.budget_exhausted or trajectory.outcome == Outcome.halted(HaltReason.LLM_LIMIT)


async def continue_rollout(
    config: RolloutConfig,
    env: Environment,
    client: ModelClient,
    trajectory: Trajectory,
    current: ActionResult,
    feedback: Optional[Feedback] = None,
    seed: Optional[int] = None,
) -> Trajectory:
    """
    Run the agent policy from the environment's current state to the end.

    Model failures finalize the trajectory as llm_limit; environment
    failures as environment_error.
    """
    while not env.done:
        step_index = trajectory.length + 1
        prompt = build_step_prompt(
            config,
            trajectory.task_description,
            trajectory.steps,
            current.observation,
            current.admissible_actions,
            feedback,
        )
        request = ChatRequest.single(
            config.model_id, prompt, temperature=config.temperature, seed=seed
        )
        try:
            completion = await client.complete(request)
        except ModelUnavailableError as e:
            logger.warning("Model unavailable at step %d of %s: %s", step_index, trajectory.task_id, e)
            return finalize(trajectory, Outcome.halted(HaltReason.LLM_LIMIT))

        outputs, action = parse_agent_completion(completion.text, trajectory.strategy, step_index)
        action = canonicalize(action, current.admissible_actions)
        trajectory, result = apply_step(
            env, trajectory, current, action, completion.text, outputs, completion.usage
        )
        if result is None:
            return trajectory
        current = result

    outcome = env.outcome(trajectory.length)
    logger.info("Rollout %s finished after %d steps: %s", trajectory.task_id, trajectory.length, outcome)
    return finalize(trajectory, outcome)


async def run_rollout(
    config: RolloutConfig,
    env: Environment,
    client: ModelClient,
    prefix: Optional[TrajectoryPrefix] = None,
    feedback: Optional[Feedback] = None,
    seed: Optional[int] = None,
) -> Trajectory:
    """
    Run one episode, optionally resuming after a replayed prefix.

    Args:
        config: Rollout settings
        env: Environment instance (reset or replayed here)
        client: Agent model client
        prefix: Steps to replay before the agent takes over
        feedback: Guidance injected into every prompt from its target step
        seed: Sampling seed forwarded to the model

    Returns:
        Finished trajectory

    Raises:
        PreconditionViolation: If feedback does not target the step after the prefix
        ReplayDivergence: If the prefix no longer reproduces on the environment
    """
    descriptor = env.descriptor
    if config.step_cap != descriptor.step_cap:
        logger.warning(
            "Rollout step cap %d differs from environment cap %d; using the environment's",
            config.step_cap, descriptor.step_cap,
        )
        config = config.model_copy(update={"step_cap": descriptor.step_cap})

    if prefix is not None:
        if feedback is not None and feedback.target_step != prefix.length + 1:
            raise PreconditionViolation(
                f"Feedback targets step {feedback.target_step} but the prefix ends at {prefix.length}",
                task_id=prefix.task_id,
            )
        if prefix.strategy != config.strategy:
            config = config.model_copy(update={"strategy": prefix.strategy})
        current = env.replay_prefix([s.action for s in prefix.steps], prefix.steps)
        trajectory = from_prefix(
            prefix, feedback=feedback, model_id=config.model_id, step_cap=descriptor.step_cap
        )
    else:
        current = env.reset()
        trajectory = Trajectory(
            schema_version=SCHEMA_VERSION,
            task_id=descriptor.task_id,
            env_name=descriptor.env_name,
            task_description=descriptor.task_description,
            strategy=config.strategy,
            model_id=config.model_id,
            seed=descriptor.seed,
            step_cap=descriptor.step_cap,
            feedback_applied=feedback,
        )

    logger.info(
        "Starting rollout %s (%s, prefix %d, feedback %s)",
        descriptor.task_id, config.strategy, trajectory.length, "yes" if feedback else "no",
    )
    return await continue_rollout(config, env, client, trajectory, current, feedback, seed)


async def run_many(
    config: RolloutConfig,
    factories: Sequence[EnvFactory],
    client: ModelClient,
    jobs: int = 1,
) -> list[Trajectory]:
    """Run independent episodes, at most `jobs` at a time, in input order."""
    semaphore = asyncio.Semaphore(max(jobs, 1))

    async def _one(factory: EnvFactory) -> Trajectory:
        async with semaphore:
            return await run_rollout(config, factory(), client)

    return list(await asyncio.gather(*(_one(factory) for factory in factories)))
