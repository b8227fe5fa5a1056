"""Strict {placeholder} prompt templates"""

import re
from typing import Any, Mapping

from pydantic import Field

from app.exceptions import MissingPlaceholder, TemplateSyntaxError, UnknownPlaceholder
from app.models.schemas import FrozenModel

# "{{" and "}}" are literal braces; "{name}" is a slot; any other brace is an error
_TOKEN_RE = re.compile(r"\{\{|\}\}|\{([A-Za-z_][A-Za-z0-9_]*)\}|[{}]")


class PromptTemplate(FrozenModel):
    """Prompt text with named slots"""
    id: str
    body: str
    required_placeholders: frozenset[str] = Field(default_factory=frozenset)

    @classmethod
    def from_body(cls, template_id: str, body: str) -> "PromptTemplate":
        """Build a template, collecting its slots and rejecting stray braces."""
        names = set()
        for match in _TOKEN_RE.finditer(body):
            token = match.group(0)
            if token in ("{{", "}}"):
                continue
            if match.group(1) is None:
                line = body.count("\n", 0, match.start()) + 1
                raise TemplateSyntaxError(
                    f"Template '{template_id}' has an unescaped '{token}' on line {line}"
                )
            names.add(match.group(1))
        return cls(id=template_id, body=body, required_placeholders=frozenset(names))


def render_template(template: PromptTemplate, bindings: Mapping[str, Any]) -> str:
    """
    Fill every slot of a template.

    Args:
        template: Template to render
        bindings: Value per placeholder name; values are inserted with str()

    Returns:
        Rendered text with escaped braces collapsed

    Raises:
        MissingPlaceholder: If a slot has no binding
        UnknownPlaceholder: If a binding has no slot
    """
    missing = sorted(template.required_placeholders - bindings.keys())
    if missing:
        raise MissingPlaceholder(missing[0])
    unknown = sorted(set(bindings.keys()) - template.required_placeholders)
    if unknown:
        raise UnknownPlaceholder(unknown[0])

    def _substitute(match: re.Match) -> str:
        token = match.group(0)
        if token == "{{":
            return "{"
        if token == "}}":
            return "}"
        return str(bindings[match.group(1)])

    return _TOKEN_RE.sub(_substitute, template.body)
