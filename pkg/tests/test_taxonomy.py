"""Tests for the closed error-type catalog."""

import pytest
from hypothesis import given, settings, strategies as st

from app.exceptions import ModuleMismatch, TaxonomyError, UnknownErrorType
from app.models.schemas import ModuleKind
from app.services.taxonomy import (
    CATALOG_VERSION,
    all_error_types,
    catalog_document,
    error_types_for,
    parse_error_label,
    parse_module,
    render_error_definitions,
)


class TestCatalog:
    def test_seventeen_leaf_types(self):
        assert len(all_error_types()) == 17

    def test_counts_per_module(self):
        counts = {module: len(error_types_for(module)) for module in ModuleKind}
        assert counts == {
            ModuleKind.MEMORY: 3,
            ModuleKind.REFLECTION: 4,
            ModuleKind.PLANNING: 3,
            ModuleKind.ACTION: 3,
            ModuleKind.SYSTEM: 4,
            ModuleKind.OTHERS: 1,
        }

    def test_document_is_versioned(self):
        document = catalog_document()
        assert document["version"] == CATALOG_VERSION
        assert [e["id"] for e in document["modules"]["system"]] == [
            "step_limit",
            "tool_execution_error",
            "llm_limit",
            "environment_error",
        ]


class TestParsing:
    @pytest.mark.parametrize(
        "module_text,expected",
        [("Planning", ModuleKind.PLANNING), ("plan", ModuleKind.PLANNING), ("memory module", ModuleKind.MEMORY),
         ("Other", ModuleKind.OTHERS)],
    )
    def test_parse_module(self, module_text, expected):
        assert parse_module(module_text) == expected

    def test_prose_name_maps_to_id(self):
        label = parse_error_label("action", "Planning-Action Disconnect")
        assert label.error_type == "planning_action_disconnect"

    def test_alias_maps_to_id(self):
        assert parse_error_label("system", "Step Limit Exhaustion").error_type == "step_limit"

    def test_hallucination_follows_module(self):
        assert parse_error_label("reflection", "hallucination").module == ModuleKind.REFLECTION
        assert parse_error_label("memory", "Hallucination (False Memory)").module == ModuleKind.MEMORY

    def test_no_error_under_any_module(self):
        assert not parse_error_label("planning", "No Error").is_error

    def test_unknown_type(self):
        with pytest.raises(UnknownErrorType):
            parse_error_label("planning", "overthinking")

    def test_type_under_wrong_module(self):
        with pytest.raises(ModuleMismatch):
            parse_error_label("memory", "format_error")

    @settings(max_examples=300)
    @given(
        module=st.sampled_from(["memory", "reflection", "planning", "action", "system", "others"]),
        text=st.text(max_size=40),
    )
    def test_fuzzed_labels_stay_in_catalog(self, module, text):
        try:
            label = parse_error_label(module, text)
        except TaxonomyError:
            return
        known = {e.id for e in error_types_for(label.module)} | {"no_error", "other"}
        assert label.error_type in known


class TestDefinitions:
    def test_scoped_block_lists_only_that_module(self):
        block = render_error_definitions(ModuleKind.PLANNING)
        assert "PLANNING MODULE ERRORS:" in block
        assert "MEMORY MODULE ERRORS:" not in block
        assert "- inefficient_planning (Inefficient Planning):" in block
        assert block.endswith("no_error: The module output matches none of the error definitions above.")

    def test_full_block_is_deterministic(self):
        assert render_error_definitions() == render_error_definitions()
        assert "SYSTEM MODULE ERRORS:" in render_error_definitions()
