"""Tests for the grid world, the replay environment and prefix replay."""

import json

import pytest
from hypothesis import given, settings, strategies as st

from app.exceptions import InvalidWorldSpec, NotFinished, ReplayDivergence, SteppedAfterDone
from app.models.schemas import (
    EnvAction,
    HaltReason,
    InvalidAction,
    Outcome,
    StepRecord,
    StrategyId,
    Trajectory,
)
from app.services.environment import NOTHING_HAPPENS
from app.services.gridworld_env import GridWorldEnv, load_world_spec
from app.services.replay_env import ReplayEnv, env_factory_for, load_recording
from app.services.trajectory_service import serialize
from tests.scenarios import WINNING_ACTIONS, mug_world


def _env(step_cap: int = 10, seed: int = 0) -> GridWorldEnv:
    return GridWorldEnv(mug_world(seed=seed), step_cap=step_cap)


def _play(env: GridWorldEnv, actions) -> list:
    return [env.step(EnvAction(text=a)) for a in actions]


class TestGridWorld:
    def test_reset_lists_containers_and_moves(self):
        result = _env().reset()
        assert result.observation.startswith("You are in the middle of a room, at kitchen.")
        assert "a countertop 1" in result.observation
        assert result.admissible_actions == (
            "go to countertop 1",
            "go to cabinet 1",
            "go to cabinet 2",
            "inventory",
            "look",
        )

    def test_winning_path(self):
        env = _env()
        env.reset()
        results = _play(env, WINNING_ACTIONS)
        assert results[1].observation == "You pick up the mug 1 from the countertop 1."
        assert results[-1].observation == "You put the mug 1 in/on the cabinet 1."
        assert results[-1].done and results[-1].success
        assert env.outcome() == Outcome.success()

    def test_admissible_actions_follow_state(self):
        env = _env()
        env.reset()
        at_counter = env.step(EnvAction(text="go to countertop 1"))
        assert "take mug 1 from countertop 1" in at_counter.admissible_actions
        assert "examine countertop 1" in at_counter.admissible_actions
        holding = env.step(EnvAction(text="take mug 1 from countertop 1"))
        assert not any(a.startswith("take ") for a in holding.admissible_actions)
        assert "put mug 1 in/on countertop 1" in holding.admissible_actions

    def test_closed_container_hides_contents(self):
        env = _env()
        env.reset()
        arrived = env.step(EnvAction(text="go to cabinet 2"))
        assert arrived.observation == "You arrive at cabinet 2. It is closed."
        assert "take plate 1 from cabinet 2" not in arrived.admissible_actions
        opened = env.step(EnvAction(text="open cabinet 2"))
        assert opened.observation == "You open the cabinet 2. The cabinet 2 is open. In it, you see a plate 1."

    def test_invalid_commands(self):
        env = _env()
        env.reset()
        for action in (EnvAction(text="open cabinet 1"), EnvAction(text="dance"), InvalidAction(raw="???")):
            result = env.step(action)
            assert result.observation == NOTHING_HAPPENS
            assert result.invalid_action

    def test_inventory(self):
        env = _env()
        env.reset()
        assert env.step(EnvAction(text="inventory")).observation == "You are not carrying anything."

    def test_step_cap_halts(self):
        env = _env(step_cap=2)
        env.reset()
        results = _play(env, ["look", "look"])
        assert results[-1].done and results[-1].success is False
        assert env.outcome() == Outcome.halted(HaltReason.STEP_LIMIT)
        with pytest.raises(SteppedAfterDone):
            env.step(EnvAction(text="look"))

    def test_outcome_before_end(self):
        env = _env()
        env.reset()
        with pytest.raises(NotFinished):
            env.outcome()

    @settings(max_examples=50, deadline=None)
    @given(
        seed=st.integers(min_value=0, max_value=10_000),
        picks=st.lists(st.integers(min_value=0, max_value=20), max_size=8),
    )
    def test_same_seed_same_run(self, seed, picks):
        def run():
            env = _env(step_cap=10, seed=seed)
            result = env.reset()
            observations = [result.observation]
            for pick in picks:
                if result.done:
                    break
                action = result.admissible_actions[pick % len(result.admissible_actions)]
                result = env.step(EnvAction(text=action))
                observations.append((result.observation, result.admissible_actions))
            return observations

        assert run() == run()


class TestReplayPrefix:
    def _records(self):
        env = _env()
        before = env.reset()
        records = []
        for i, text in enumerate(WINNING_ACTIONS[:3], start=1):
            action = EnvAction(text=text)
            after = env.step(action)
            records.append(StepRecord(
                index=i,
                observation=before.observation,
                admissible_actions=before.admissible_actions,
                action=action,
                env_response=after.observation,
            ))
            before = after
        return records, before

    def test_replay_reaches_recorded_state(self):
        records, expected = self._records()
        env = _env()
        result = env.replay_prefix([r.action for r in records], records)
        assert result == expected
        assert env.steps_taken == 3

    def test_divergence_detected(self):
        records, _ = self._records()
        tampered = records[1].model_copy(update={"env_response": "You pick up a spoon."})
        env = _env()
        with pytest.raises(ReplayDivergence) as exc:
            env.replay_prefix([r.action for r in records], [records[0], tampered, records[2]])
        assert exc.value.step == 2


def _recording(outcome: Outcome) -> Trajectory:
    env = _env()
    before = env.reset()
    steps = []
    for i, text in enumerate(WINNING_ACTIONS, start=1):
        action = EnvAction(text=text)
        after = env.step(action)
        steps.append(StepRecord(
            index=i,
            observation=before.observation,
            admissible_actions=before.admissible_actions,
            action=action,
            env_response=after.observation,
        ))
        before = after
    return Trajectory(
        task_id="mug-task",
        env_name="gridworld",
        task_description="put mug 1 in cabinet 1.",
        strategy=StrategyId.ACT_ONLY,
        model_id="scripted",
        step_cap=10,
        steps=tuple(steps),
        outcome=outcome,
    )


class TestReplayEnv:
    def test_recorded_actions_replay_to_recorded_outcome(self):
        recording = _recording(Outcome.success())
        env = ReplayEnv(recording)
        result = env.reset()
        assert result.observation == recording.steps[0].observation
        for step in recording.steps:
            result = env.step(step.action)
            assert result.observation == step.env_response
        assert env.done
        assert env.outcome() == Outcome.success()

    def test_other_actions_do_not_advance(self):
        recording = _recording(Outcome.success())
        env = ReplayEnv(recording)
        env.reset()
        result = env.step(EnvAction(text="look"))
        assert result.invalid_action
        assert result.admissible_actions == recording.steps[0].admissible_actions
        assert env.step(recording.steps[0].action).observation == recording.steps[0].env_response

    def test_load_recording(self, data_dir):
        path = data_dir / "mug-task.json"
        path.write_text(serialize(_recording(Outcome.success())), encoding="utf-8")
        assert load_recording(path).length == 5
        factory = env_factory_for("replay", path)
        assert factory().descriptor.env_name == "replay"

    def test_invalid_recording(self, data_dir):
        path = data_dir / "broken.json"
        path.write_text("{}", encoding="utf-8")
        with pytest.raises(InvalidWorldSpec):
            load_recording(path)


class TestWorldFiles:
    def test_load_world_spec(self, data_dir):
        path = data_dir / "mug.json"
        path.write_text(mug_world().model_dump_json(), encoding="utf-8")
        assert load_world_spec(path) == mug_world()
        env = env_factory_for("gridworld", path, step_cap=6)()
        assert env.descriptor.step_cap == 6
        assert env.descriptor.task_id == "mug-task"

    def test_inconsistent_world(self, data_dir):
        data = json.loads(mug_world().model_dump_json())
        data["goal"]["receptacle"] = "fridge 1"
        path = data_dir / "bad.json"
        path.write_text(json.dumps(data), encoding="utf-8")
        with pytest.raises(InvalidWorldSpec):
            load_world_spec(path)

    def test_unknown_environment(self, data_dir):
        with pytest.raises(InvalidWorldSpec):
            env_factory_for("webshop", data_dir / "x.json")
