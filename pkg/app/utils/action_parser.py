"""Parsing of tagged agent completions into module outputs and canonical actions"""

import json
import re
from typing import Optional, Sequence

from pydantic import ValidationError

from app.exceptions import JsonExtractionError
from app.models.schemas import (
    CanonicalAction,
    EnvAction,
    FinalAnswer,
    InvalidAction,
    ModuleKind,
    StrategyId,
    ToolCall,
    collapse_whitespace,
    modules_for_step,
)
from app.utils.json_extract import extract_json

# Tag names per module; the GAIA template asks for <memory_recall> but shows <memory>
MODULE_TAGS: dict[ModuleKind, tuple[str, ...]] = {
    ModuleKind.MEMORY: ("memory", "memory_recall"),
    ModuleKind.REFLECTION: ("reflection",),
    ModuleKind.PLANNING: ("plan",),
    ModuleKind.ACTION: ("action",),
}

_TOOL_CALL_RE = re.compile(
    r"^(?:action|tool)\s*:\s*\[?\s*([A-Za-z_][A-Za-z0-9_.\-]*)\s*\]?\s*(?:parameters\s*:\s*(.*))?$",
    re.DOTALL | re.IGNORECASE,
)


def extract_tag(text: str, tag: str) -> Optional[str]:
    """Innermost content of the last <tag>...</tag> block, stripped, or None."""
    pattern = re.compile(
        rf"<{tag}>((?:(?!<{tag}>).)*?)</{tag}>",
        re.DOTALL | re.IGNORECASE,
    )
    matches = pattern.findall(text)
    if not matches:
        return None
    return matches[-1].strip()


def _extract_module(text: str, module: ModuleKind) -> Optional[str]:
    for tag in MODULE_TAGS[module]:
        content = extract_tag(text, tag)
        if content is not None:
            return content
    return None


def parse_action_body(body: str) -> CanonicalAction:
    """Turn the body of an <action> tag into a tool call or environment command."""
    stripped = body.strip()
    if not stripped:
        return InvalidAction(raw=body)

    match = _TOOL_CALL_RE.match(stripped)
    if match:
        name, params_text = match.group(1), match.group(2)
        parameters: dict = {}
        if params_text and params_text.strip():
            try:
                parameters = extract_json(params_text)
            except JsonExtractionError:
                return InvalidAction(raw=body)
        try:
            return ToolCall(name=name, parameters=parameters)
        except ValidationError:
            return InvalidAction(raw=body)

    return EnvAction(text=stripped)


def parse_agent_completion(
    text: str,
    strategy: StrategyId,
    step_index: Optional[int] = None,
) -> tuple[dict[ModuleKind, str], CanonicalAction]:
    """
    Split an agent completion into module outputs and its action.

    Only the tags of the strategy's module set are kept; on the first step
    memory and reflection are dropped. <answer> takes precedence over
    <action> and yields a final answer.

    Args:
        text: Raw completion text
        strategy: Strategy the completion was produced under
        step_index: 1-based step the completion belongs to, if known

    Returns:
        (module_outputs, action); the action is invalid when neither tag parses
    """
    modules = modules_for_step(strategy, step_index or 2)
    outputs: dict[ModuleKind, str] = {}
    for module in modules:
        content = _extract_module(text, module)
        if content is not None:
            outputs[module] = content

    answer = extract_tag(text, "answer")
    if answer is not None and answer:
        return outputs, FinalAnswer(text=answer)

    action_body = extract_tag(text, "action")
    if action_body is None:
        return outputs, InvalidAction(raw=text)
    return outputs, parse_action_body(action_body)


def normalize_action(raw_text: str, admissible: Optional[Sequence[str]] = None) -> CanonicalAction:
    """
    Match free text against the admissible actions.

    Exact match after whitespace normalization wins, then a unique
    case-insensitive match. Anything else passes through unchanged.
    """
    text = collapse_whitespace(raw_text)
    if not text:
        return InvalidAction(raw=raw_text)
    if not admissible:
        return EnvAction(text=text)

    candidates = [collapse_whitespace(a) for a in admissible]
    if text in candidates:
        return EnvAction(text=text)

    folded = text.casefold()
    equal = [a for a in candidates if a.casefold() == folded]
    if len(equal) == 1:
        return EnvAction(text=equal[0])

    return EnvAction(text=text)


def canonicalize(action: CanonicalAction, admissible: Optional[Sequence[str]]) -> CanonicalAction:
    """Apply admissible-list normalization to environment commands only."""
    if isinstance(action, EnvAction):
        return normalize_action(action.text, admissible)
    return action


def render_action_tag(action: CanonicalAction) -> str:
    """Completion text that parses back to exactly this action."""
    if isinstance(action, EnvAction):
        return f"<action>{action.text}</action>"
    if isinstance(action, ToolCall):
        parameters = json.dumps(action.parameters, ensure_ascii=False)
        return f"<action>action: {action.name} parameters: {parameters}</action>"
    if isinstance(action, FinalAnswer):
        return f"<answer>{action.text}</answer>"
    return action.raw
