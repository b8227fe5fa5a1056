"""Tests for JSON extraction from model output."""

import pytest

from app.exceptions import NoJsonFound, ParseFailure, UnbalancedBraces
from app.utils.json_extract import extract_json


class TestExtractJson:
    def test_object_inside_prose(self):
        text = 'Here is my verdict: {"error_detected": false, "error_type": "no_error"} Hope it helps.'
        assert extract_json(text) == {"error_detected": False, "error_type": "no_error"}

    def test_code_fence(self):
        text = '```json\n{"critical_step": 3}\n```'
        assert extract_json(text) == {"critical_step": 3}

    def test_braces_inside_strings_are_ignored(self):
        text = '{"evidence": "saw {weird} text", "n": 1} trailing }'
        assert extract_json(text) == {"evidence": "saw {weird} text", "n": 1}

    def test_trailing_comma_repaired(self):
        assert extract_json('{"a": [1, 2,], "b": 3,}') == {"a": [1, 2], "b": 3}

    def test_smart_quotes_normalized(self):
        assert extract_json("{“step”: 2}") == {"step": 2}

    def test_curly_quotes_inside_valid_string_kept(self):
        text = '{"evidence": "agent said “go to cabinet 1”"}'
        assert extract_json(text) == {"evidence": "agent said “go to cabinet 1”"}

    def test_fence_marker_inside_valid_string_kept(self):
        text = 'Verdict: {"reasoning": "wrapped in ```json fences", "step": 2}'
        assert extract_json(text) == {"reasoning": "wrapped in ```json fences", "step": 2}

    def test_array_shape(self):
        assert extract_json('Scores: [0.9, 0.2, 1]', shape="array") == [0.9, 0.2, 1]

    def test_first_object_wins(self):
        assert extract_json('{"a": 1} {"b": 2}') == {"a": 1}

    def test_no_json(self):
        with pytest.raises(NoJsonFound):
            extract_json("no structured answer here")

    def test_unbalanced(self):
        with pytest.raises(UnbalancedBraces):
            extract_json('{"a": {"b": 1}')

    def test_invalid_after_repair(self):
        with pytest.raises(ParseFailure):
            extract_json("{error_type: no_error}")
