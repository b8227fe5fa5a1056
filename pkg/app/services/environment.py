"""Environment interface with prefix replay and outcome mapping"""

import logging
from abc import ABC, abstractmethod
from typing import Callable, Optional, Sequence

from app.exceptions import (
    NonDeterministicEnv,
    NotFinished,
    ReplayDivergence,
    SteppedAfterDone,
)
from app.models.schemas import (
    ActionResult,
    CanonicalAction,
    EnvDescriptor,
    HaltReason,
    Outcome,
    StepRecord,
)

# Configure logging
logger = logging.getLogger(__name__)

NOTHING_HAPPENS = "Nothing happens."


class Environment(ABC):
    """
    One episode of a text environment.

    Subclasses implement `_reset` and `_step`; this base class tracks the
    step count, refuses steps after the episode ends and maps the end state
    to an Outcome. Instances are single-threaded.
    """

    def __init__(self, descriptor: EnvDescriptor):
        self._descriptor = descriptor
        self._steps_taken = 0
        self._last: Optional[ActionResult] = None

    @property
    def descriptor(self) -> EnvDescriptor:
        return self._descriptor

    @property
    def steps_taken(self) -> int:
        return self._steps_taken

    @property
    def done(self) -> bool:
        return self._last is not None and self._last.done

    @property
    def last_result(self) -> Optional[ActionResult]:
        return self._last

    @abstractmethod
    def _reset(self) -> ActionResult:
        """Restore the seed-determined initial state."""

    @abstractmethod
    def _step(self, action: CanonicalAction) -> ActionResult:
        """Apply one action; `done` at the step cap is handled by the base class."""

    def reset(self) -> ActionResult:
        self._steps_taken = 0
        self._last = self._reset()
        return self._last

    def step(self, action: CanonicalAction) -> ActionResult:
        """
        Apply one action.

        Raises:
            SteppedAfterDone: If the episode already ended
        """
        if self.done:
            raise SteppedAfterDone(
                f"Episode {self._descriptor.task_id} already ended",
                task_id=self._descriptor.task_id,
                step=self._steps_taken + 1,
            )
        result = self._step(action)
        self._steps_taken += 1
        if not result.done and self._steps_taken >= self._descriptor.step_cap:
            result = result.model_copy(update={"done": True, "success": False})
        self._last = result
        return result

    def replay_prefix(
        self,
        actions: Sequence[CanonicalAction],
        records: Optional[Sequence[StepRecord]] = None,
    ) -> ActionResult:
        """
        Reset, then re-apply recorded actions in order.

        Args:
            actions: Actions of steps 1..t-1
            records: Recorded steps to check each result against

        Returns:
            The result the agent sees before step t

        Raises:
            NonDeterministicEnv: If the environment cannot reproduce a run
            ReplayDivergence: If a result differs from its record
        """
        task_id = self._descriptor.task_id
        if not self._descriptor.deterministic:
            raise NonDeterministicEnv(
                f"Environment {self._descriptor.env_name} is not deterministic", task_id=task_id
            )

        result = self.reset()
        if records:
            if result.observation != records[0].observation:
                raise ReplayDivergence(
                    "Initial observation differs from the record", task_id=task_id, step=1
                )

        for i, action in enumerate(actions):
            result = self.step(action)
            if records is None or i >= len(records):
                continue
            if result.observation != records[i].env_response:
                raise ReplayDivergence(
                    f"Step {i + 1} response differs from the record: "
                    f"{result.observation!r} != {records[i].env_response!r}",
                    task_id=task_id,
                    step=i + 1,
                )
            following = records[i + 1] if i + 1 < len(records) else None
            if following is not None and following.admissible_actions != result.admissible_actions:
                raise ReplayDivergence(
                    f"Admissible actions before step {i + 2} differ from the record",
                    task_id=task_id,
                    step=i + 2,
                )

        logger.debug("Replayed %d actions on %s", len(actions), task_id)
        return result

    def outcome(self, steps_taken: Optional[int] = None) -> Outcome:
        """
        Map the end state to an Outcome.

        Raises:
            NotFinished: If the episode is still running under its cap
        """
        steps = self._steps_taken if steps_taken is None else steps_taken
        cap = self._descriptor.step_cap
        if self.done and self._last.success:
            return Outcome.success()
        if steps >= cap:
            return Outcome.halted(HaltReason.STEP_LIMIT)
        if self.done:
            return Outcome.failure()
        raise NotFinished(
            f"Episode {self._descriptor.task_id} is running ({steps}/{cap} steps)",
            task_id=self._descriptor.task_id,
        )

    def checkpoint(self) -> object:
        """Snapshot hook for simulators that cannot be replayed."""
        raise NotImplementedError("checkpointing is not supported; use replay_prefix")


EnvFactory = Callable[[], Environment]
