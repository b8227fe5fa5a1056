"""Seeded household text world with ALFWorld-style commands"""

import json
import logging
import random
import re
from pathlib import Path
from typing import Optional, Union

from pydantic import ValidationError

from app.exceptions import InvalidWorldSpec
from app.models.schemas import (
    ActionResult,
    CanonicalAction,
    ContainerSpec,
    EnvAction,
    EnvDescriptor,
    WorldSpec,
)
from app.services.environment import NOTHING_HAPPENS, Environment

# Configure logging
logger = logging.getLogger(__name__)

ENV_NAME = "gridworld"

_GO_RE = re.compile(r"^go to (.+)$")
_OPEN_RE = re.compile(r"^open (.+)$")
_CLOSE_RE = re.compile(r"^close (.+)$")
_TAKE_RE = re.compile(r"^take (.+?) from (.+)$")
_PUT_RE = re.compile(r"^put (.+?) (?:in/on|in|on) (.+)$")
_EXAMINE_RE = re.compile(r"^examine (.+)$")


def _list_objects(objects: list[str]) -> str:
    """ALFWorld phrasing: 'a mug 1', 'a apple 1, and a mug 1', 'nothing'."""
    if not objects:
        return "nothing"
    items = [f"a {name}" for name in objects]
    if len(items) == 1:
        return items[0]
    return ", ".join(items[:-1]) + ", and " + items[-1]


def load_world_spec(path: Union[str, Path]) -> WorldSpec:
    """
    Read a WorldSpec JSON file.

    Raises:
        InvalidWorldSpec: If the file is missing, not JSON, or inconsistent
    """
    path = Path(path)
    if not path.exists():
        raise InvalidWorldSpec(f"World file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
        return WorldSpec.model_validate(data)
    except ValueError as e:
        # ValidationError is a ValueError
        raise InvalidWorldSpec(f"World file {path} is invalid: {e}") from e


class _Container:
    __slots__ = ("spec", "location", "is_open", "contents")

    def __init__(self, spec: ContainerSpec, location: str):
        self.spec = spec
        self.location = location
        self.is_open = False
        self.contents = list(spec.contents)

    @property
    def accessible(self) -> bool:
        return self.is_open or not self.spec.openable


class GridWorldEnv(Environment):
    """
    Object-placement world built from a WorldSpec.

    Locations hold containers; openable containers start closed. The agent
    holds at most one object. The episode succeeds when the goal object is
    inside the goal receptacle.
    """

    def __init__(self, spec: WorldSpec, step_cap: int = 30):
        super().__init__(
            EnvDescriptor(
                env_name=ENV_NAME,
                task_id=spec.task_id,
                task_description=spec.description,
                step_cap=step_cap,
                deterministic=True,
                seed=spec.seed,
            )
        )
        self.spec = spec
        self._location = spec.start_location
        self._containers: dict[str, _Container] = {}
        self._holding: Optional[str] = None

    # ------------------------------------------------------------------ state

    def _build_state(self) -> None:
        self._location = self.spec.start_location
        self._holding = None
        self._containers = {
            c.name: _Container(c, loc.name) for loc in self.spec.locations for c in loc.containers
        }

    def _here(self) -> list[_Container]:
        return [c for c in self._containers.values() if c.location == self._location]

    def _goal_met(self) -> bool:
        receptacle = self._containers[self.spec.goal.receptacle]
        return self.spec.goal.object in receptacle.contents

    def _describe(self, container: _Container, as_location: bool) -> str:
        subject = "It" if as_location else f"The {container.spec.name}"
        if container.spec.openable and not container.is_open:
            return f"{subject} is closed."
        if container.spec.openable:
            return f"{subject} is open. In it, you see {_list_objects(container.contents)}."
        return f"On the {container.spec.name}, you see {_list_objects(container.contents)}."

    def _location_text(self, opening: str) -> str:
        parts = [opening]
        for container in self._here():
            parts.append(self._describe(container, as_location=container.spec.name == self._location))
        return " ".join(parts)

    def admissible_actions(self) -> tuple[str, ...]:
        """Legal commands in the current state, in fixed order."""
        actions = [f"go to {loc.name}" for loc in self.spec.locations if loc.name != self._location]
        for container in self._here():
            name = container.spec.name
            if container.spec.openable:
                actions.append(f"close {name}" if container.is_open else f"open {name}")
            if container.accessible:
                if self._holding is None:
                    actions.extend(f"take {obj} from {name}" for obj in container.contents)
                else:
                    actions.append(f"put {self._holding} in/on {name}")
            actions.append(f"examine {name}")
        actions.extend(["inventory", "look"])
        return tuple(actions)

    def _result(self, observation: str, invalid: bool = False) -> ActionResult:
        if self._goal_met():
            return ActionResult(
                observation=observation,
                admissible_actions=self.admissible_actions(),
                done=True,
                success=True,
                invalid_action=invalid,
            )
        return ActionResult(
            observation=observation,
            admissible_actions=self.admissible_actions(),
            invalid_action=invalid,
        )

    def _invalid(self) -> ActionResult:
        return self._result(NOTHING_HAPPENS, invalid=True)

    # ------------------------------------------------------------ environment

    def _reset(self) -> ActionResult:
        self._build_state()
        names = [c for c in self._containers]
        random.Random(self.spec.seed).shuffle(names)
        observation = (
            f"You are in the middle of a room, at {self.spec.start_location}. Looking quickly around you, you see "
            f"{_list_objects(names)}."
        )
        return ActionResult(observation=observation, admissible_actions=self.admissible_actions())

    def _step(self, action: CanonicalAction) -> ActionResult:
        if not isinstance(action, EnvAction):
            return self._invalid()
        text = action.text.lower()

        if text == "inventory":
            if self._holding is None:
                return self._result("You are not carrying anything.")
            return self._result(f"You are carrying: a {self._holding}.")
        if text == "look":
            return self._result(self._location_text(f"You are at {self._location}."))

        match = _GO_RE.match(text)
        if match:
            target = match.group(1)
            names = {loc.name for loc in self.spec.locations}
            if target not in names or target == self._location:
                return self._invalid()
            self._location = target
            return self._result(self._location_text(f"You arrive at {target}."))

        match = _OPEN_RE.match(text)
        if match:
            container = self._reachable(match.group(1))
            if container is None or not container.spec.openable or container.is_open:
                return self._invalid()
            container.is_open = True
            name = container.spec.name
            return self._result(
                f"You open the {name}. The {name} is open. In it, you see "
                f"{_list_objects(container.contents)}."
            )

        match = _CLOSE_RE.match(text)
        if match:
            container = self._reachable(match.group(1))
            if container is None or not container.spec.openable or not container.is_open:
                return self._invalid()
            container.is_open = False
            return self._result(f"You close the {container.spec.name}.")

        match = _TAKE_RE.match(text)
        if match:
            obj, container = match.group(1), self._reachable(match.group(2))
            if (
                container is None
                or not container.accessible
                or obj not in container.contents
                or self._holding is not None
            ):
                return self._invalid()
            container.contents.remove(obj)
            self._holding = obj
            return self._result(f"You pick up the {obj} from the {container.spec.name}.")

        match = _PUT_RE.match(text)
        if match:
            obj, container = match.group(1), self._reachable(match.group(2))
            if container is None or not container.accessible or self._holding != obj:
                return self._invalid()
            container.contents.append(obj)
            self._holding = None
            return self._result(f"You put the {obj} in/on the {container.spec.name}.")

        match = _EXAMINE_RE.match(text)
        if match:
            container = self._reachable(match.group(1))
            if container is None:
                return self._invalid()
            return self._result(self._describe(container, as_location=False))

        return self._invalid()

    def _reachable(self, name: str) -> Optional[_Container]:
        container = self._containers.get(name)
        if container is None or container.location != self._location:
            return None
        return container
