"""Tests for trajectory building, slicing, serialization and validation."""

import json

import pytest

from app.exceptions import IndexGap, ModuleRuleViolation, OutOfRange, SchemaViolation, TrajectoryError, TrajectoryFinalized
from app.models.schemas import (
    EnvAction,
    HaltReason,
    ModuleKind,
    Outcome,
    StepRecord,
    StrategyId,
    Trajectory,
)
from app.services.trajectory_service import (
    append_step,
    deserialize,
    finalize,
    from_prefix,
    serialize,
    truncate_before,
    validate,
)
from tests.scenarios import completion_for


def _open(strategy: StrategyId = StrategyId.REACT, step_cap=None) -> Trajectory:
    return Trajectory(
        task_id="mug-task",
        env_name="gridworld",
        task_description="put mug 1 in cabinet 1.",
        strategy=strategy,
        model_id="scripted",
        step_cap=step_cap,
    )


def _record(index: int, action: str = "look", **overrides) -> StepRecord:
    values = dict(
        index=index,
        observation=f"observation {index}",
        admissible_actions=("look", "inventory"),
        module_outputs={ModuleKind.PLANNING: f"Next I will {action}.", ModuleKind.ACTION: action},
        action=EnvAction(text=action),
        env_response=f"response {index}",
        raw_completion=completion_for(action),
    )
    values.update(overrides)
    return StepRecord(**values)


def _built(n: int, outcome: Outcome = None, **kwargs) -> Trajectory:
    trajectory = _open(**kwargs)
    for i in range(1, n + 1):
        trajectory = append_step(trajectory, _record(i))
    return finalize(trajectory, outcome or Outcome.failure())


class TestAppend:
    def test_append_returns_new_value(self):
        empty = _open()
        grown = append_step(empty, _record(1))
        assert empty.length == 0
        assert grown.length == 1

    def test_index_gap(self):
        with pytest.raises(IndexGap):
            append_step(_open(), _record(2))

    def test_first_step_memory_rejected(self):
        record = _record(1, module_outputs={ModuleKind.MEMORY: "recall"})
        with pytest.raises(ModuleRuleViolation):
            append_step(_open(StrategyId.MODULAR), record)

    def test_module_outside_strategy_rejected(self):
        record = _record(1, module_outputs={ModuleKind.PLANNING: "plan"})
        with pytest.raises(ModuleRuleViolation):
            append_step(_open(StrategyId.ACT_ONLY), record)

    def test_finished_trajectory_is_frozen(self):
        with pytest.raises(TrajectoryFinalized):
            append_step(_built(1), _record(2))


class TestFinalize:
    def test_step_limit_requires_full_cap(self):
        trajectory = append_step(_open(step_cap=3), _record(1))
        with pytest.raises(TrajectoryError):
            finalize(trajectory, Outcome.halted(HaltReason.STEP_LIMIT))

    def test_twice(self):
        with pytest.raises(TrajectoryFinalized):
            finalize(_built(1), Outcome.success())


class TestTruncate:
    def test_prefix_keeps_steps_before_cut(self):
        trajectory = _built(4)
        prefix = truncate_before(trajectory, 3)
        assert prefix.steps == trajectory.steps[:2]
        assert prefix.task_id == trajectory.task_id

    def test_bounds(self):
        trajectory = _built(4)
        assert truncate_before(trajectory, 1).length == 0
        assert truncate_before(trajectory, 5).length == 4
        for t in (0, 6):
            with pytest.raises(OutOfRange):
                truncate_before(trajectory, t)

    def test_from_prefix_reopens(self):
        reopened = from_prefix(truncate_before(_built(4), 3), model_id="other")
        assert reopened.outcome is None
        assert reopened.length == 2
        assert reopened.model_id == "other"


class TestSerialization:
    def test_round_trip(self):
        trajectory = _built(3, Outcome.halted(HaltReason.STEP_LIMIT), step_cap=3)
        text = serialize(trajectory)
        assert text.endswith("\n")
        assert deserialize(text) == trajectory

    def test_serialization_is_canonical(self):
        trajectory = _built(2)
        assert serialize(trajectory) == serialize(deserialize(serialize(trajectory)))

    def test_unfinished_cannot_be_serialized(self):
        with pytest.raises(TrajectoryError):
            serialize(append_step(_open(), _record(1)))

    def test_missing_version(self):
        data = json.loads(serialize(_built(1)))
        del data["schema_version"]
        with pytest.raises(SchemaViolation) as exc:
            deserialize(json.dumps(data))
        assert exc.value.path == "schema_version"

    def test_unsupported_version(self):
        data = json.loads(serialize(_built(1)))
        data["schema_version"] = 2
        with pytest.raises(SchemaViolation):
            deserialize(json.dumps(data))

    def test_missing_outcome(self):
        data = json.loads(serialize(_built(1)))
        data["outcome"] = None
        with pytest.raises(SchemaViolation) as exc:
            deserialize(json.dumps(data))
        assert exc.value.path == "outcome"

    def test_bad_field_reports_path(self):
        data = json.loads(serialize(_built(2)))
        data["steps"][1]["index"] = 0
        with pytest.raises(SchemaViolation) as exc:
            deserialize(json.dumps(data))
        assert exc.value.path.startswith("steps.1.index")

    def test_not_json(self):
        with pytest.raises(SchemaViolation):
            deserialize("{not json")


class TestValidate:
    def test_clean(self):
        assert validate(_built(3)) == []

    def test_index_gap(self):
        trajectory = _built(2)
        broken = trajectory.model_copy(update={"steps": (trajectory.steps[0], _record(3))})
        assert [v.rule for v in validate(broken)] == ["IndexGap"]

    def test_reparse_mismatch(self):
        trajectory = _built(2)
        tampered = trajectory.steps[1].model_copy(update={"action": EnvAction(text="inventory")})
        broken = trajectory.model_copy(update={"steps": (trajectory.steps[0], tampered)})
        violations = validate(broken)
        assert [(v.rule, v.step) for v in violations] == [("ActionReparseMismatch", 2)]

    def test_step_limit_length(self):
        trajectory = _built(2, step_cap=5)
        broken = trajectory.model_copy(update={"outcome": Outcome.halted(HaltReason.STEP_LIMIT)})
        assert [v.rule for v in validate(broken)] == ["StepCapMismatch"]

    def test_first_step_memory(self):
        trajectory = _built(1, strategy=StrategyId.MODULAR)
        bad = trajectory.steps[0].model_copy(update={"module_outputs": {ModuleKind.MEMORY: "recall"}, "raw_completion": ""})
        broken = trajectory.model_copy(update={"steps": (bad,)})
        assert "ModuleRuleViolation" in [v.rule for v in validate(broken)]
