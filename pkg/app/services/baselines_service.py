"""Comparison methods: self-refine, best-of-N sampling and tree-of-thought search"""

import json
import logging
from dataclasses import dataclass
from typing import Optional

from app.exceptions import (
    JudgeParseFailure,
    ModelUnavailableError,
    ParseFailure,
    PreconditionViolation,
    ScoreParseFailure,
)
from app.models.schemas import (
    ActionResult,
    ChatRequest,
    DebugAttempt,
    DebugResult,
    EnvAction,
    ErrorLabel,
    Feedback,
    HaltReason,
    ModuleKind,
    OTHER_ERROR,
    Outcome,
    RolloutConfig,
    StrategyId,
    TokenUsage,
    Trajectory,
)
from app.services.analyzer_service import describe_trajectory
from app.services.environment import EnvFactory
from app.services.llm_client import ModelClient, complete_json
from app.services.prompt_library import env_type_for, load_prompt
from app.services.rollout_service import format_action_history, forced_step, out_of_tokens, run_rollout
from app.services.trajectory_service import SCHEMA_VERSION, finalize
from app.utils.action_parser import normalize_action
from app.utils.prompts import render_template

# Configure logging
logger = logging.getLogger(__name__)

GENERIC_LABEL = ErrorLabel(module=ModuleKind.OTHERS, error_type=OTHER_ERROR)


class _ArmedBudget:
    """Arms a token budget on a client for the duration of a block."""

    def __init__(self, client: ModelClient, tokens: Optional[int]):
        self.client = client
        self.tokens = tokens
        self._previous: Optional[int] = None

    def __enter__(self) -> "_ArmedBudget":
        self._start = self.client.usage_report()
        self._previous = self.client.budget
        if self.tokens is not None:
            self.client.arm_budget(self._start.total + self.tokens)
        return self

    def __exit__(self, *exc) -> None:
        self.client.arm_budget(self._previous)

    def spent(self) -> TokenUsage:
        return self.client.usage_report() - self._start


# ============================================================================
# Self-refine
# ============================================================================

async def self_refine_loop(
    env_factory: EnvFactory,
    agent_client: ModelClient,
    budget: int,
    config: RolloutConfig,
    initial: Optional[Trajectory] = None,
    token_budget: Optional[int] = None,
) -> DebugResult:
    """
    Ask the agent model why its run failed and restart from step 1 with its answer.

    Args:
        env_factory: Fresh environments for the task
        agent_client: Backend for both the agent and its self-feedback
        budget: Maximum restarts
        config: Agent rollout settings
        initial: Existing first run; a new one is rolled out when omitted
        token_budget: Tokens the whole loop may spend, counted from the call

    Returns:
        DebugResult with one attempt per restart
    """
    if budget < 1:
        raise PreconditionViolation(f"Refine budget must be at least 1, got {budget}")

    with _ArmedBudget(agent_client, token_budget) as armed:
        if initial is None:
            initial = await run_rollout(config, env_factory(), agent_client)
        if initial.is_success:
            return DebugResult(
                method="self_refine", initial=initial, final_outcome=initial.outcome, total_usage=armed.spent()
            )

        attempts: list[DebugAttempt] = []
        guidance_history: list[str] = []
        last = initial
        for k in range(1, budget + 1):
            if out_of_tokens(last, agent_client):
                logger.info("Self-refine out of tokens before attempt %d", k)
                break
            prompt = render_template(load_prompt("self_refine"), {"trajectory": describe_trajectory(last)})
            request = ChatRequest.single(config.model_id, prompt, temperature=config.temperature)
            try:
                completion = await agent_client.complete(request)
            except ModelUnavailableError as e:
                logger.warning("Self-refine feedback call failed before attempt %d: %s", k, e)
                break

            feedback = Feedback(
                target_step=1,
                error_label=GENERIC_LABEL,
                guidance=completion.text.strip() or "Try a different approach.",
                attempt_index=k,
                prior_guidance=tuple(guidance_history),
            )
            guidance_history.append(feedback.guidance)
            last = await run_rollout(config, env_factory(), agent_client, feedback=feedback)
            attempts.append(DebugAttempt(feedback=feedback, trajectory=last))
            logger.info("Self-refine attempt %d/%d: %s", k, budget, last.outcome)
            if last.is_success:
                break

        final = attempts[-1].trajectory.outcome if attempts else initial.outcome
        return DebugResult(
            method="self_refine",
            initial=initial,
            attempts=tuple(attempts),
            final_outcome=final,
            total_usage=armed.spent(),
        )


# ============================================================================
# Best-of-N
# ============================================================================

async def best_of_n(
    env_factory: EnvFactory,
    agent_client: ModelClient,
    n: int,
    config: RolloutConfig,
    seed: int = 0,
    token_budget: Optional[int] = None,
) -> DebugResult:
    """
    Independent rollouts with seeds seed, seed+1, ... until one succeeds or n are spent.

    The first rollout is the result's initial trajectory and the rest are
    its attempts, each without feedback.
    """
    if n < 1:
        raise PreconditionViolation(f"n must be at least 1, got {n}")

    with _ArmedBudget(agent_client, token_budget) as armed:
        runs: list[Trajectory] = []
        for i in range(n):
            if runs and out_of_tokens(runs[-1], agent_client):
                logger.info("Best-of-%d out of tokens after sample %d", n, i)
                break
            trajectory = await run_rollout(config, env_factory(), agent_client, seed=seed + i)
            runs.append(trajectory)
            logger.info("Best-of-%d sample %d: %s", n, i + 1, trajectory.outcome)
            if trajectory.is_success:
                break

        return DebugResult(
            method="best_of_n",
            initial=runs[0],
            attempts=tuple(DebugAttempt(trajectory=t) for t in runs[1:]),
            final_outcome=runs[-1].outcome,
            total_usage=armed.spent(),
        )


# ============================================================================
# Tree-of-thought search
# ============================================================================

@dataclass
class _SearchState:
    trajectory: Trajectory
    current: ActionResult


def _history_block(trajectory: Trajectory, config: RolloutConfig, label: str) -> str:
    history = format_action_history(trajectory.steps, config.history_window, config.obs_char_limit)
    return f"{label}:\n{history}\n\n" if history else ""


async def _propose(
    client: ModelClient, state: _SearchState, k: int, env_type: str, config: RolloutConfig
) -> list[EnvAction]:
    prompt = render_template(
        load_prompt("tot_propose"),
        {
            "env_type": env_type,
            "history_desc": _history_block(state.trajectory, config, "Recent history"),
            "obs": state.current.observation,
            "k": k,
            "diversity_desc": "" if k == 1 else "\nMake the proposals meaningfully different from each other.",
        },
    )
    request = ChatRequest.single(config.model_id, prompt, temperature=config.temperature)
    try:
        data = await complete_json(client, request, shape="array")
    except ParseFailure as e:
        raise JudgeParseFailure(
            f"Proposal reply is not a JSON list: {e}", task_id=state.trajectory.task_id
        ) from e

    proposals: list[EnvAction] = []
    for item in data if isinstance(data, list) else []:
        if not isinstance(item, str) or not item.strip():
            continue
        action = normalize_action(item, state.current.admissible_actions)
        if isinstance(action, EnvAction) and action not in proposals:
            proposals.append(action)
    return proposals[:k]


async def _score(
    client: ModelClient,
    state: _SearchState,
    candidates: list[EnvAction],
    env_type: str,
    config: RolloutConfig,
) -> list[float]:
    prompt = render_template(
        load_prompt("tot_value"),
        {
            "env_type": env_type,
            "history_section": _history_block(state.trajectory, config, "Recent history"),
            "obs": state.current.observation,
            "cand_json": json.dumps([c.text for c in candidates], ensure_ascii=False),
        },
    )
    request = ChatRequest.single(config.model_id, prompt, temperature=0.0)
    try:
        data = await complete_json(client, request, shape="array")
    except ParseFailure as e:
        raise ScoreParseFailure(f"Value reply is not a JSON array: {e}", task_id=state.trajectory.task_id) from e

    if (
        not isinstance(data, list)
        or len(data) != len(candidates)
        or any(isinstance(x, bool) or not isinstance(x, (int, float)) for x in data)
    ):
        raise ScoreParseFailure(
            f"Expected {len(candidates)} numeric scores, got {data!r}", task_id=state.trajectory.task_id
        )
    return [min(max(float(x), 0.0), 1.0) for x in data]


async def tot_search(
    env_factory: EnvFactory,
    agent_client: ModelClient,
    k: int,
    beam: int,
    config: RolloutConfig,
    token_budget: Optional[int] = None,
) -> DebugResult:
    """
    Breadth-first beam search over next actions.

    At each depth every state in the beam gets up to `k` proposals, each
    proposal is scored in one value call, and the `beam` best children
    overall survive. Ties keep state order, then proposal order. Children
    are built by replaying the parent's actions on a fresh environment.
    The first child that succeeds ends the search.

    Args:
        env_factory: Fresh, replayable environments for the task
        agent_client: Backend for proposals and scores
        k: Proposals per state
        beam: States kept per depth
        config: Rollout settings; the strategy is forced to act_only
        token_budget: Tokens the search may spend

    Returns:
        DebugResult whose initial trajectory is the chosen leaf

    Raises:
        ScoreParseFailure: If a value reply is not an aligned numeric array
    """
    if k < 1 or beam < 1:
        raise PreconditionViolation(f"k and beam must be at least 1, got k={k} beam={beam}")

    config = config.model_copy(update={"strategy": StrategyId.ACT_ONLY})
    root_env = env_factory()
    descriptor = root_env.descriptor
    env_type = env_type_for(descriptor.env_name)

    root = _SearchState(
        trajectory=Trajectory(
            schema_version=SCHEMA_VERSION,
            task_id=descriptor.task_id,
            env_name=descriptor.env_name,
            task_description=descriptor.task_description,
            strategy=StrategyId.ACT_ONLY,
            model_id=config.model_id,
            seed=descriptor.seed,
            step_cap=descriptor.step_cap,
        ),
        current=root_env.reset(),
    )

    logger.info("=" * 80)
    logger.info("TREE SEARCH STARTED")
    logger.info("Task: %s, k=%d, beam=%d", descriptor.task_id, k, beam)
    logger.info("=" * 80)

    finished: list[Trajectory] = []
    states = [root]
    halted_by_model = False

    with _ArmedBudget(agent_client, token_budget) as armed:
        while states:
            scored: list[tuple[float, int, int, _SearchState, EnvAction]] = []
            try:
                for si, state in enumerate(states):
                    proposals = await _propose(agent_client, state, k, env_type, config)
                    if not proposals:
                        continue
                    scores = await _score(agent_client, state, proposals, env_type, config)
                    for ci, (action, score) in enumerate(zip(proposals, scores)):
                        scored.append((score, si, ci, state, action))
            except ModelUnavailableError as e:
                logger.warning("Tree search stopped at depth %d: %s", states[0].trajectory.length + 1, e)
                halted_by_model = True
                break
            if not scored:
                break

            scored.sort(key=lambda entry: (-entry[0], entry[1], entry[2]))
            next_states: list[_SearchState] = []
            for score, _, _, parent, action in scored[:beam]:
                env = env_factory()
                current = env.replay_prefix([s.action for s in parent.trajectory.steps], parent.trajectory.steps)
                child, result = forced_step(env, parent.trajectory, current, action)
                if result is None:
                    finished.append(child)
                    continue
                if env.done:
                    leaf = finalize(child, env.outcome(child.length))
                    finished.append(leaf)
                    if leaf.is_success:
                        logger.info("Tree search succeeded at depth %d via '%s'", leaf.length, action.text)
                        return DebugResult(
                            method="tot", initial=leaf, final_outcome=leaf.outcome, total_usage=armed.spent()
                        )
                    continue
                next_states.append(_SearchState(trajectory=child, current=result))
            states = next_states

        if finished:
            chosen = finished[0]
        else:
            best = states[0] if states else root
            reason = Outcome.halted(HaltReason.LLM_LIMIT) if halted_by_model else Outcome.failure()
            chosen = finalize(best.trajectory, reason)

        logger.info("Tree search ended without success: %s", chosen.outcome)
        return DebugResult(method="tot", initial=chosen, final_outcome=chosen.outcome, total_usage=armed.spent())
