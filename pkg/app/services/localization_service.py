"""Counterfactual localization: replace one action, re-run, and search for the earliest fix"""

import hashlib
import logging
from typing import Awaitable, Callable, Optional

from app.config import settings
from app.exceptions import CriticalStepNotFound, OutOfRange, PreconditionViolation
from app.models.schemas import (
    CanonicalAction,
    ChatRequest,
    CriticalDiagnosis,
    ErrorLabel,
    LocalizationResult,
    ModuleKind,
    OTHER_ERROR,
    ProbeRecord,
    RolloutConfig,
    Trajectory,
)
from app.services.environment import EnvFactory
from app.services.llm_client import ModelClient
from app.services.prompt_library import load_prompt
from app.services.rollout_service import (
    config_for_trajectory,
    continue_rollout,
    format_action_history,
    forced_step,
)
from app.services.trajectory_service import finalize, from_prefix, truncate_before
from app.utils.action_parser import canonicalize, extract_tag, parse_action_body
from app.utils.formatting import format_action_list
from app.utils.prompts import render_template

# Configure logging
logger = logging.getLogger(__name__)

Probe = Callable[[int], Awaitable[bool]]


# ============================================================================
# Corrector
# ============================================================================

class Corrector:
    """
    Proposes a replacement action for one step of a failed trajectory.

    Proposals are memoized per (trajectory content, step), so repeated
    probes of the same step cost one model call.
    """

    def __init__(self, client: ModelClient, model_id: Optional[str] = None):
        self.client = client
        self.model_id = model_id or settings.effective_judge_model
        self._memo: dict[tuple[str, int], CanonicalAction] = {}

    @staticmethod
    def _fingerprint(trajectory: Trajectory) -> str:
        return hashlib.sha256(trajectory.model_dump_json().encode("utf-8")).hexdigest()

    def _prompt(self, trajectory: Trajectory, t: int) -> str:
        record = trajectory.step(t)
        earlier = trajectory.steps[: t - 1]
        later = trajectory.steps[t:]
        continuation = format_action_history(later, len(later), settings.history_obs_char_limit)
        continuation = "\n".join(filter(None, [continuation, f"Outcome: {trajectory.outcome}"]))
        return render_template(
            load_prompt("corrector"),
            {
                "task_description": trajectory.task_description,
                "environment": trajectory.env_name,
                "prefix": format_action_history(earlier, len(earlier), settings.history_obs_char_limit)
                or "(none)",
                "step_num": t,
                "observation": record.observation,
                "admissible_actions": format_action_list(record.admissible_actions),
                "original_action": record.action.describe(),
                "continuation": continuation,
            },
        )

    async def propose(self, trajectory: Trajectory, t: int) -> CanonicalAction:
        """
        Replacement action for step t, canonicalized against that step's admissible list.

        Raises:
            OutOfRange: If t is not a step of the trajectory
        """
        if not 1 <= t <= trajectory.length:
            raise OutOfRange(f"Step {t} is outside 1..{trajectory.length}", task_id=trajectory.task_id, step=t)

        key = (self._fingerprint(trajectory), t)
        if key in self._memo:
            return self._memo[key]

        request = ChatRequest.single(self.model_id, self._prompt(trajectory, t), temperature=0.0)
        completion = await self.client.complete(request)
        body = extract_tag(completion.text, "action")
        action = parse_action_body(body if body is not None else completion.text.strip())
        action = canonicalize(action, trajectory.step(t).admissible_actions)

        logger.debug("Corrector proposal for %s step %d: %s", trajectory.task_id, t, action.describe())
        self._memo[key] = action
        return action


async def propose_correction(trajectory: Trajectory, t: int, corrector: Corrector) -> CanonicalAction:
    return await corrector.propose(trajectory, t)


# ============================================================================
# Counterfactual probes
# ============================================================================

async def counterfactual_fix_succeeds(
    trajectory: Trajectory,
    t: int,
    corrected_action: CanonicalAction,
    env_factory: EnvFactory,
    agent_client: ModelClient,
    config: Optional[RolloutConfig] = None,
) -> tuple[bool, Trajectory]:
    """
    Replay steps 1..t-1, take `corrected_action` at t, then let the agent finish.

    Returns:
        (succeeded, counterfactual trajectory)

    Raises:
        OutOfRange: If t is not a step of the trajectory
        NonDeterministicEnv: If the environment cannot replay
        ReplayDivergence: If the prefix no longer reproduces
    """
    config = config or config_for_trajectory(trajectory)
    env = env_factory()
    prefix = truncate_before(trajectory, t)
    current = env.replay_prefix([s.action for s in prefix.steps], prefix.steps)

    counterfactual = from_prefix(prefix, model_id=config.model_id, step_cap=env.descriptor.step_cap)
    action = canonicalize(corrected_action, current.admissible_actions)
    counterfactual, result = forced_step(env, counterfactual, current, action)
    if result is None:
        return False, counterfactual

    if env.done:
        counterfactual = finalize(counterfactual, env.outcome(counterfactual.length))
    else:
        counterfactual = await continue_rollout(config, env, agent_client, counterfactual, result)
    return counterfactual.is_success, counterfactual


async def scan_earliest_success(length: int, probe: Probe) -> tuple[Optional[int], list[tuple[int, bool]]]:
    """Probe steps 1..length in order and stop at the first success."""
    probes: list[tuple[int, bool]] = []
    for t in range(1, length + 1):
        ok = await probe(t)
        probes.append((t, ok))
        if ok:
            return t, probes
    return None, probes


async def search_earliest_success(length: int, probe: Probe) -> tuple[Optional[int], list[tuple[int, bool]]]:
    """
    Binary search for the earliest fixable step, assuming fixability is monotone.

    Uses at most floor(log2(length)) + 1 probes.
    """
    probes: list[tuple[int, bool]] = []
    low, high, best = 1, length, None
    while low <= high:
        mid = (low + high) // 2
        ok = await probe(mid)
        probes.append((mid, ok))
        if ok:
            best = mid
            high = mid - 1
        else:
            low = mid + 1
    return best, probes


# ============================================================================
# Localizers
# ============================================================================

def _diagnosis_for_fix(trajectory: Trajectory, t: int, action: CanonicalAction) -> CriticalDiagnosis:
    original = trajectory.step(t).action.describe()
    return CriticalDiagnosis(
        trajectory_id=trajectory.task_id,
        critical_step=t,
        critical_module=ModuleKind.OTHERS,
        error_label=ErrorLabel(module=ModuleKind.OTHERS, error_type=OTHER_ERROR),
        root_cause=f"Replacing the action at step {t} completes the task",
        evidence=f"Original action: {original}",
        correction_guidance=f"At step {t}, take '{action.describe()}' instead of '{original}'.",
    )


async def _localize(
    method: str,
    trajectory: Trajectory,
    env_factory: EnvFactory,
    corrector: Corrector,
    agent_client: ModelClient,
    config: Optional[RolloutConfig],
) -> LocalizationResult:
    if trajectory.is_success:
        raise PreconditionViolation("Cannot localize a successful trajectory", task_id=trajectory.task_id)

    config = config or config_for_trajectory(trajectory)
    tried: dict[int, CanonicalAction] = {}

    async def _probe(t: int) -> bool:
        action = await corrector.propose(trajectory, t)
        tried[t] = action
        ok, _ = await counterfactual_fix_succeeds(trajectory, t, action, env_factory, agent_client, config)
        logger.info("Probe %s step %d with '%s': %s", trajectory.task_id, t, action.describe(), ok)
        return ok

    logger.info("=" * 80)
    logger.info("COUNTERFACTUAL LOCALIZATION (%s)", method)
    logger.info("Trajectory: %s (%d steps)", trajectory.task_id, trajectory.length)
    logger.info("=" * 80)

    search = scan_earliest_success if method == "brute" else search_earliest_success
    found, outcomes = await search(trajectory.length, _probe)
    probes = tuple(ProbeRecord(step=t, action=tried[t], success=ok) for t, ok in outcomes)

    if found is None:
        raise CriticalStepNotFound(
            f"No single-step correction fixed {trajectory.task_id} ({len(probes)} probes)",
            task_id=trajectory.task_id,
        )
    return LocalizationResult(
        critical_step=found,
        diagnosis=_diagnosis_for_fix(trajectory, found, tried[found]),
        probes=probes,
    )


async def brute_force_localize(
    trajectory: Trajectory,
    env_factory: EnvFactory,
    corrector: Corrector,
    agent_client: ModelClient,
    config: Optional[RolloutConfig] = None,
) -> LocalizationResult:
    """
    Earliest step whose corrected action makes the re-run succeed, probing 1..T in order.

    Raises:
        PreconditionViolation: If the trajectory succeeded
        CriticalStepNotFound: If no probe succeeds
    """
    return await _localize("brute", trajectory, env_factory, corrector, agent_client, config)


async def binary_search_localize(
    trajectory: Trajectory,
    env_factory: EnvFactory,
    corrector: Corrector,
    agent_client: ModelClient,
    config: Optional[RolloutConfig] = None,
) -> LocalizationResult:
    """
    Same as brute_force_localize but bisects, assuming later fixes stay fixable.

    Raises:
        PreconditionViolation: If the trajectory succeeded
        CriticalStepNotFound: If the last probed step is not fixable
    """
    return await _localize("binary", trajectory, env_factory, corrector, agent_client, config)
