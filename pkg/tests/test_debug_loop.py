"""Tests for the iterative debug loop and feedback updates."""

import json

import pytest

from app.exceptions import PreconditionViolation
from app.models.schemas import ErrorLabel, Feedback, HaltReason, ModuleKind, Outcome
from app.services.debug_service import debug_loop, update_feedback
from app.services.llm_client import ScriptedModelClient
from app.services.rollout_service import FEEDBACK_HEADER, run_rollout
from tests.scenarios import (
    ANALYSIS_MARKER,
    PLANTED_STEP,
    buggy_agent,
    judge_responder,
    mug_config,
    mug_factory,
    scripted_judge,
)

# Ten tasks leave room to finish after the planted step; two run out of steps right at it
BUNDLE = [(f"mug-{i:02d}", 8) for i in range(10)] + [("mug-10", 4), ("mug-11", 4)]


async def _failed(step_cap: int = 8, task_id: str = "mug-task"):
    return await run_rollout(mug_config(step_cap=step_cap), mug_factory(step_cap, task_id)(), buggy_agent())


class TestDebugLoop:
    @pytest.mark.asyncio
    async def test_flips_planted_failure(self, factory, judge, agent):
        initial = await _failed()

        result = await debug_loop(initial, factory, judge, agent, budget=3)

        assert result.method == "debug"
        assert result.diagnosis.critical_step == PLANTED_STEP
        assert result.success_attempt() == 1
        assert result.final_outcome == Outcome.success()
        attempt = result.attempts[0]
        assert attempt.feedback.target_step == PLANTED_STEP
        assert attempt.trajectory.steps[: PLANTED_STEP - 1] == initial.steps[: PLANTED_STEP - 1]
        assert attempt.trajectory.length == PLANTED_STEP + 1
        assert result.total_usage.total > 0

    @pytest.mark.asyncio
    async def test_bundle_flip_rate(self):
        flipped = 0
        for task_id, step_cap in BUNDLE:
            initial = await _failed(step_cap, task_id)
            assert not initial.is_success
            result = await debug_loop(
                initial, mug_factory(step_cap, task_id), scripted_judge(), buggy_agent(), budget=3
            )
            for attempt in result.attempts:
                prefix_length = attempt.feedback.target_step - 1
                assert attempt.trajectory.steps[:prefix_length] == initial.steps[:prefix_length]
            flipped += result.final_outcome.is_success
        assert flipped == 10

    @pytest.mark.asyncio
    async def test_unfixable_uses_whole_budget(self):
        initial = await _failed(step_cap=4)
        result = await debug_loop(initial, mug_factory(4), scripted_judge(), buggy_agent(), budget=3)

        assert len(result.attempts) == 3
        assert result.success_attempt() is None
        assert result.final_outcome == Outcome.halted(HaltReason.STEP_LIMIT)
        second = result.attempts[1].feedback
        assert second.attempt_index == 2
        assert second.target_step <= result.attempts[0].feedback.target_step
        assert second.prior_guidance == (result.attempts[0].feedback.guidance,)

    @pytest.mark.asyncio
    async def test_refused_agent_call_ends_attempts(self):
        initial = await _failed(step_cap=4)
        agent = buggy_agent()
        agent.arm_budget(1)

        result = await debug_loop(initial, mug_factory(4), scripted_judge(), agent, budget=3)

        assert len(result.attempts) == 1
        assert result.final_outcome == Outcome.halted(HaltReason.LLM_LIMIT)
        assert agent.call_count == 0

    @pytest.mark.asyncio
    async def test_initial_success_returns_without_calls(self, factory, react_config, solver, judge):
        initial = await run_rollout(react_config, factory(), solver)
        result = await debug_loop(initial, factory, judge, solver, budget=3)

        assert result.attempts == ()
        assert result.success_attempt() == 0
        assert judge.call_count == 0

    @pytest.mark.asyncio
    @pytest.mark.parametrize("budget", [0, -1])
    async def test_budget_must_be_positive(self, factory, judge, agent, budget):
        initial = await _failed()
        with pytest.raises(PreconditionViolation):
            await debug_loop(initial, factory, judge, agent, budget=budget)

    @pytest.mark.asyncio
    async def test_direct_analyzer(self, factory, judge, agent):
        initial = await _failed()
        result = await debug_loop(initial, factory, judge, agent, budget=2, analyzer="direct")

        assert result.method == "direct_debug"
        assert str(result.diagnosis.error_label) == "others/other"
        assert result.attempts[0].feedback.target_step == PLANTED_STEP
        assert result.final_outcome.is_success

    @pytest.mark.asyncio
    async def test_feedback_reaches_agent_prompt(self, factory, judge, agent):
        initial = await _failed()
        await debug_loop(initial, factory, judge, agent, budget=1)
        prompt = agent.requests[-1].prompt_text
        assert FEEDBACK_HEADER in prompt
        assert f"- Critical step: {PLANTED_STEP}" in prompt
        assert "- Guidance: Open cabinet 1 and put the mug 1 in it" in prompt

    @pytest.mark.asyncio
    async def test_no_critical_step_ends_without_attempts(self, factory, agent):
        initial = await _failed()
        judge = ScriptedModelClient(
            rules=[{"match": ANALYSIS_MARKER, "responses": [json.dumps({"critical_step": None})], "repeat": True}],
            responder=judge_responder,
        )
        result = await debug_loop(initial, factory, judge, agent, budget=3)
        assert result.attempts == ()
        assert result.final_outcome == initial.outcome


class TestUpdateFeedback:
    def _previous(self, target: int) -> Feedback:
        return Feedback(
            target_step=target,
            error_label=ErrorLabel(module=ModuleKind.ACTION, error_type="format_error"),
            guidance="Use exact command text",
        )

    @pytest.mark.asyncio
    async def test_target_never_moves_later(self, judge):
        failed = await _failed()
        feedback = await update_feedback(self._previous(2), failed, judge)
        assert feedback.target_step == 2
        assert feedback.attempt_index == 2
        assert feedback.prior_guidance == ("Use exact command text",)
        assert feedback.guidance == "Open cabinet 1 and put the mug 1 in it"

    @pytest.mark.asyncio
    async def test_earlier_step_wins(self, judge):
        failed = await _failed()
        feedback = await update_feedback(self._previous(6), failed, judge)
        assert feedback.target_step == PLANTED_STEP
        assert str(feedback.error_label) == "planning/inefficient_planning"

    @pytest.mark.asyncio
    async def test_success_rejected(self, factory, react_config, solver, judge):
        trajectory = await run_rollout(react_config, factory(), solver)
        with pytest.raises(PreconditionViolation):
            await update_feedback(self._previous(2), trajectory, judge)
