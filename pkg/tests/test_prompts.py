"""Prompt templates: placeholder rules and verbatim anchor text."""

import pytest

from app.exceptions import MissingPlaceholder, TemplateError, TemplateSyntaxError, UnknownPlaceholder
from app.models.schemas import Feedback, ErrorLabel, ModuleKind, RolloutConfig, StrategyId
from app.services.prompt_library import (
    available_template_sets,
    env_type_for,
    load_prompt,
    load_template_set,
    template_set_for,
)
from app.services.rollout_service import FEEDBACK_HEADER, build_step_prompt
from app.utils.prompts import PromptTemplate, render_template


class TestPromptTemplate:
    def test_collects_placeholders_and_escapes(self):
        template = PromptTemplate.from_body("t", 'Step {step_num}: {{"a": 1}}')
        assert template.required_placeholders == {"step_num"}
        assert render_template(template, {"step_num": 3}) == 'Step 3: {"a": 1}'

    def test_missing_binding(self):
        template = PromptTemplate.from_body("t", "{a} {b}")
        with pytest.raises(MissingPlaceholder):
            render_template(template, {"a": 1})

    def test_unknown_binding(self):
        template = PromptTemplate.from_body("t", "{a}")
        with pytest.raises(UnknownPlaceholder):
            render_template(template, {"a": 1, "z": 2})

    def test_stray_brace(self):
        with pytest.raises(TemplateSyntaxError):
            PromptTemplate.from_body("t", "value: {not closed")


class TestJudgePrompts:
    def test_detector_anchor(self):
        template = load_prompt("detector")
        bindings = {name: f"<{name}>" for name in template.required_placeholders}
        text = render_template(template, bindings)
        assert text.startswith("You are an expert at detecting errors in agent trajectories.")
        assert '"error_detected": true/false,' in text
        assert "MODULE TO ANALYZE: <module_name>" in text

    def test_critical_analysis_anchor(self):
        template = load_prompt("critical_analysis")
        bindings = {name: f"<{name}>" for name in template.required_placeholders}
        text = render_template(template, bindings)
        assert "identify the CRITICAL ERROR" in text
        assert '"critical_step": <step_number>,' in text
        assert '"cascading_effects": [{ "step": <step_number>, "impact": "description" }]}' in text

    def test_all_single_file_prompts_load(self):
        for name in ("detector", "critical_analysis", "vanilla_debug", "self_refine",
                     "corrector", "tot_propose", "tot_value"):
            assert load_prompt(name).body

    def test_unknown_prompt(self):
        with pytest.raises(TemplateError):
            load_prompt("does_not_exist")


class TestRolloutTemplates:
    def test_sets_and_aliases(self):
        assert {"alfworld", "webshop", "gaia", "gridworld"} <= set(available_template_sets())
        assert load_template_set("gridworld").id == "alfworld"
        assert template_set_for("gridworld") == "gridworld"
        assert template_set_for("somewhere-else") == "alfworld"
        assert env_type_for("gridworld") == "ALFWorld"

    def test_first_step_prompt(self):
        config = RolloutConfig(strategy=StrategyId.MODULAR, template_set="gridworld")
        text = build_step_prompt(config, "put mug 1 in cabinet 1.", [], "You are in a room.", ["look", "inventory"])
        assert text.startswith("You are an expert agent operating in the ALFRED Embodied Environment.")
        assert "Your admissible actions of the current situation are: ['look', 'inventory']." in text
        assert "<plan>" in text
        assert "<memory>" not in text
        assert "<reflection>" not in text

    def test_act_only_prompt_has_action_section_only(self):
        config = RolloutConfig(strategy=StrategyId.ACT_ONLY, template_set="gridworld")
        text = build_step_prompt(config, "task", [], "obs", ["look"])
        assert "<action>" in text
        assert "<plan>" not in text

    def test_feedback_inserted_from_target_step(self):
        config = RolloutConfig(strategy=StrategyId.REACT, template_set="gridworld")
        feedback = Feedback(
            target_step=1,
            error_label=ErrorLabel(module=ModuleKind.PLANNING, error_type="inefficient_planning"),
            guidance="Open cabinet 1 first",
        )
        text = build_step_prompt(config, "task", [], "obs", ["look"], feedback)
        assert FEEDBACK_HEADER in text
        assert "- Guidance: Open cabinet 1 first" in text
        assert "- Error type: planning/inefficient_planning" in text

    def test_feedback_absent_before_target_step(self):
        config = RolloutConfig(strategy=StrategyId.REACT, template_set="gridworld")
        feedback = Feedback(
            target_step=3,
            error_label=ErrorLabel(module=ModuleKind.PLANNING, error_type="inefficient_planning"),
            guidance="Open cabinet 1 first",
        )
        text = build_step_prompt(config, "task", [], "obs", ["look"], feedback)
        assert FEEDBACK_HEADER not in text
