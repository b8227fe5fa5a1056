"""Tests for the agent episode loop."""

import pytest

from app.exceptions import PreconditionViolation
from app.models.schemas import (
    EnvAction,
    ErrorLabel,
    Feedback,
    HaltReason,
    InvalidAction,
    ModuleKind,
    Outcome,
    StrategyId,
)
from app.services.environment import Environment
from app.services.llm_client import ScriptedModelClient
from app.services.rollout_service import (
    FEEDBACK_HEADER,
    config_for_trajectory,
    format_action_history,
    format_feedback_block,
    run_many,
    run_rollout,
)
from app.services.trajectory_service import serialize, truncate_before, validate
from tests.scenarios import (
    PLANTED_ACTION,
    PLANTED_STEP,
    WINNING_ACTIONS,
    completion_for,
    good_agent,
    mug_config,
    mug_factory,
)


def _feedback(target: int) -> Feedback:
    return Feedback(
        target_step=target,
        error_label=ErrorLabel(module=ModuleKind.PLANNING, error_type="inefficient_planning"),
        guidance="Open cabinet 1 and put the mug 1 in it",
    )


class TestRunRollout:
    @pytest.mark.asyncio
    async def test_good_agent_succeeds(self, factory, react_config, solver):
        trajectory = await run_rollout(react_config, factory(), solver)

        assert trajectory.outcome == Outcome.success()
        assert [s.action.text for s in trajectory.steps] == list(WINNING_ACTIONS)
        assert validate(trajectory) == []
        assert trajectory.steps[0].module_outputs[ModuleKind.PLANNING] == "Next I will go to countertop 1."
        assert solver.call_count == 5

    @pytest.mark.asyncio
    async def test_buggy_agent_hits_step_cap(self, factory, react_config, agent):
        trajectory = await run_rollout(react_config, factory(), agent)

        assert trajectory.outcome == Outcome.halted(HaltReason.STEP_LIMIT)
        assert trajectory.length == 8
        assert trajectory.step(PLANTED_STEP).action == EnvAction(text=PLANTED_ACTION)
        assert validate(trajectory) == []

    @pytest.mark.asyncio
    async def test_modular_strategy_records_all_modules_after_first_step(self, factory, modular_config, solver):
        trajectory = await run_rollout(modular_config, factory(), solver)
        assert set(trajectory.step(1).module_outputs) == {ModuleKind.PLANNING, ModuleKind.ACTION}
        assert ModuleKind.MEMORY in trajectory.step(2).module_outputs
        assert validate(trajectory) == []

    @pytest.mark.asyncio
    async def test_step_usage_recorded(self, factory, react_config, solver):
        trajectory = await run_rollout(react_config, factory(), solver)
        assert sum(s.token_usage.total for s in trajectory.steps) == solver.usage_report().total

    @pytest.mark.asyncio
    async def test_unparseable_completion_is_recorded_invalid(self, react_config):
        client = ScriptedModelClient(responses=["I refuse to use tags."] * 2)
        trajectory = await run_rollout(react_config, mug_factory(step_cap=2)(), client)
        assert isinstance(trajectory.step(1).action, InvalidAction)
        assert trajectory.step(1).env_response == "Nothing happens."
        assert trajectory.outcome == Outcome.halted(HaltReason.STEP_LIMIT)

    @pytest.mark.asyncio
    async def test_exhausted_script_halts_as_llm_limit(self, factory, react_config):
        client = ScriptedModelClient(responses=[completion_for(a) for a in WINNING_ACTIONS[:2]])
        trajectory = await run_rollout(react_config, factory(), client)
        assert trajectory.length == 2
        assert trajectory.outcome == Outcome.halted(HaltReason.LLM_LIMIT)

    @pytest.mark.asyncio
    async def test_environment_crash_halts_as_environment_error(self, react_config, solver):
        class Crashing(Environment):
            def __init__(self):
                super().__init__(mug_factory()().descriptor)

            def _reset(self):
                return mug_factory()().reset()

            def _step(self, action):
                raise RuntimeError("simulator died")

        trajectory = await run_rollout(react_config, Crashing(), solver)
        assert trajectory.length == 0
        assert trajectory.outcome == Outcome.halted(HaltReason.ENVIRONMENT_ERROR)

    @pytest.mark.asyncio
    async def test_environment_cap_wins(self, solver):
        config = mug_config(StrategyId.REACT, step_cap=30)
        trajectory = await run_rollout(config, mug_factory(step_cap=8)(), solver)
        assert trajectory.step_cap == 8


class TestResume:
    @pytest.mark.asyncio
    async def test_prefix_is_preserved_and_feedback_applied(self, factory, react_config, agent):
        initial = await run_rollout(react_config, factory(), agent)
        prefix = truncate_before(initial, PLANTED_STEP)

        resumed = await run_rollout(react_config, factory(), agent, prefix, _feedback(PLANTED_STEP))

        assert resumed.is_success
        assert resumed.steps[: PLANTED_STEP - 1] == initial.steps[: PLANTED_STEP - 1]
        assert resumed.step(PLANTED_STEP).action == EnvAction(text="open cabinet 1")
        assert resumed.feedback_applied.target_step == PLANTED_STEP
        assert FEEDBACK_HEADER in agent.requests[-1].prompt_text

    @pytest.mark.asyncio
    async def test_feedback_must_target_step_after_prefix(self, factory, react_config, agent):
        initial = await run_rollout(react_config, factory(), agent)
        with pytest.raises(PreconditionViolation):
            await run_rollout(react_config, factory(), agent, truncate_before(initial, 3), _feedback(4))

    @pytest.mark.asyncio
    async def test_resume_does_not_call_model_for_prefix(self, factory, react_config, agent, solver):
        initial = await run_rollout(react_config, factory(), agent)
        await run_rollout(react_config, factory(), solver, truncate_before(initial, PLANTED_STEP), _feedback(PLANTED_STEP))
        assert solver.call_count == 2


class TestRunMany:
    @pytest.mark.asyncio
    async def test_order_and_determinism(self, react_config):
        factories = [mug_factory(step_cap=8, task_id=f"mug-{i}") for i in range(4)]

        first = await run_many(react_config, factories, good_agent(), jobs=3)
        second = await run_many(react_config, factories, good_agent(), jobs=1)

        assert [t.task_id for t in first] == ["mug-0", "mug-1", "mug-2", "mug-3"]
        assert all(t.is_success for t in first)
        assert [serialize(t) for t in first] == [serialize(t) for t in second]


class TestFormatting:
    @pytest.mark.asyncio
    async def test_history_window(self, factory, react_config, solver):
        trajectory = await run_rollout(react_config, factory(), solver)
        history = format_action_history(trajectory.steps, 2)
        lines = history.splitlines()
        assert len(lines) == 2
        assert lines[0].startswith("Step 4 — Observation: ")
        assert "; Action: open cabinet 1; Result: " in lines[0]

    def test_empty_history(self):
        assert format_action_history([], 5) == ""

    def test_feedback_block_lists_earlier_guidance(self):
        feedback = Feedback(
            target_step=2,
            error_label=ErrorLabel(module=ModuleKind.ACTION, error_type="format_error"),
            guidance="Use the exact command text",
            attempt_index=3,
            prior_guidance=("Try again", "Look around first"),
        )
        block = format_feedback_block(feedback)
        assert block.splitlines() == [
            FEEDBACK_HEADER,
            "- Critical step: 2",
            "- Error type: action/format_error",
            "- Guidance: Use the exact command text",
            "- Earlier guidance that did not succeed:",
            "  1. Try again",
            "  2. Look around first",
        ]


class TestConfigForTrajectory:
    @pytest.mark.asyncio
    async def test_reproduces_recorded_settings(self, factory, react_config, agent):
        trajectory = await run_rollout(react_config, factory(), agent)
        config = config_for_trajectory(trajectory, history_window=3)
        assert config.strategy == StrategyId.REACT
        assert config.step_cap == 8
        assert config.template_set == "gridworld"
        assert config.history_window == 3
