"""Offline environment that replays a recorded trajectory"""

import logging
from pathlib import Path
from typing import Union

from app.exceptions import EnvHarnessError, InvalidWorldSpec, TrajectoryError
from app.models.schemas import (
    ActionResult,
    CanonicalAction,
    EnvDescriptor,
    Outcome,
    Trajectory,
)
from app.services.environment import NOTHING_HAPPENS, EnvFactory, Environment
from app.services.gridworld_env import ENV_NAME as GRIDWORLD, GridWorldEnv, load_world_spec
from app.services.trajectory_service import deserialize

# Configure logging
logger = logging.getLogger(__name__)

ENV_NAME = "replay"


class ReplayEnv(Environment):
    """
    Treats a recorded trajectory as ground truth.

    The recorded action at the current position advances the replay and
    returns the recorded response; any other action is invalid and leaves
    the position unchanged. Once every recorded step has been replayed the
    episode ends with the recorded outcome.
    """

    def __init__(self, recording: Trajectory):
        if not recording.steps:
            raise EnvHarnessError("Cannot replay an empty trajectory", task_id=recording.task_id)
        super().__init__(
            EnvDescriptor(
                env_name=ENV_NAME,
                task_id=recording.task_id,
                task_description=recording.task_description,
                step_cap=recording.step_cap or recording.length,
                deterministic=True,
                seed=recording.seed,
            )
        )
        self.recording = recording
        self._position = 0

    def _reset(self) -> ActionResult:
        self._position = 0
        first = self.recording.steps[0]
        return ActionResult(observation=first.observation, admissible_actions=first.admissible_actions)

    def _step(self, action: CanonicalAction) -> ActionResult:
        steps = self.recording.steps
        current = steps[self._position]
        if action != current.action:
            return ActionResult(
                observation=NOTHING_HAPPENS,
                admissible_actions=current.admissible_actions,
                invalid_action=True,
            )

        self._position += 1
        if self._position == len(steps):
            return ActionResult(
                observation=current.env_response,
                admissible_actions=None,
                done=True,
                success=self.recording.is_success,
            )
        following = steps[self._position]
        return ActionResult(observation=current.env_response, admissible_actions=following.admissible_actions)

    def outcome(self, steps_taken=None) -> Outcome:
        if self._position == len(self.recording.steps) and self.recording.outcome is not None:
            return self.recording.outcome
        return super().outcome(steps_taken)


def load_recording(path: Union[str, Path]) -> Trajectory:
    """Read a recorded trajectory file for replay."""
    path = Path(path)
    if not path.exists():
        raise InvalidWorldSpec(f"Recording not found: {path}")
    try:
        return deserialize(path.read_text(encoding="utf-8"))
    except TrajectoryError as e:
        raise InvalidWorldSpec(f"Recording {path} is invalid: {e}") from e


def env_factory_for(env_name: str, source: Union[str, Path], step_cap: int = 30) -> EnvFactory:
    """
    Factory of fresh environments for one task.

    Args:
        env_name: "gridworld" (source is a WorldSpec file) or "replay"
            (source is a recorded trajectory file)
        source: Path of the task definition
        step_cap: Episode cap for built worlds

    Raises:
        InvalidWorldSpec: For an unknown env_name or unreadable source
    """
    if env_name == GRIDWORLD:
        spec = load_world_spec(source)
        return lambda: GridWorldEnv(spec, step_cap=step_cap)
    if env_name == ENV_NAME:
        recording = load_recording(source)
        return lambda: ReplayEnv(recording)
    raise InvalidWorldSpec(f"Unknown environment '{env_name}'; expected one of {sorted(ENVIRONMENTS)}")


ENVIRONMENTS = {GRIDWORLD: GridWorldEnv, ENV_NAME: ReplayEnv}
