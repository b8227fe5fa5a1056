"""Closed error-type catalog: lookup, label parsing and prompt rendering"""

import logging
import re
from typing import Any, Optional

from app.exceptions import ModuleMismatch, UnknownErrorType
from app.models.schemas import (
    NO_ERROR,
    OTHER_ERROR,
    ErrorLabel,
    ErrorType,
    ModuleKind,
)

# Configure logging
logger = logging.getLogger(__name__)

CATALOG_VERSION = 1

NO_ERROR_DEFINITION = "The module output matches none of the error definitions above."

CATALOG: tuple[ErrorType, ...] = (
    # Memory
    ErrorType(
        id="over_simplification",
        module=ModuleKind.MEMORY,
        prose_name="Over-simplification / Incomplete Summary",
        definition="Summarizes past info too crudely, ignoring details; leads to flawed reasoning.",
        aliases=("over_simplification", "oversimplification", "incomplete_summary"),
    ),
    ErrorType(
        id="hallucination",
        module=ModuleKind.MEMORY,
        prose_name="Hallucination (False Memory)",
        definition="Recalls events or states that never happened, filling missing gaps with fabricated info.",
        aliases=("false_memory", "memory_hallucination"),
    ),
    ErrorType(
        id="retrieval_failure",
        module=ModuleKind.MEMORY,
        prose_name="Retrieval Failure",
        definition="Relevant info exists but is not retrieved when needed.",
    ),
    # Reflection
    ErrorType(
        id="progress_misassessment",
        module=ModuleKind.REFLECTION,
        prose_name="Progress Misassessment",
        definition="Incorrectly evaluates progress (too optimistic, too pessimistic, or misses completion).",
    ),
    ErrorType(
        id="outcome_misinterpretation",
        module=ModuleKind.REFLECTION,
        prose_name="Outcome Misinterpretation",
        definition="Executes an action but misreads the immediate result or environment feedback.",
    ),
    ErrorType(
        id="causal_misattribution",
        module=ModuleKind.REFLECTION,
        prose_name="Causal Misattribution",
        definition="Correctly notes failure but blames the wrong cause, misguiding subsequent plans.",
    ),
    ErrorType(
        id="hallucination",
        module=ModuleKind.REFLECTION,
        prose_name="Hallucination",
        definition="Reflects on events/results that never occurred.",
        aliases=("reflection_hallucination",),
    ),
    # Planning
    ErrorType(
        id="constraint_ignorance",
        module=ModuleKind.PLANNING,
        prose_name="Constraint Ignorance",
        definition="Ignores limits (time, budget, space, etc.) when forming plans.",
    ),
    ErrorType(
        id="impossible_action",
        module=ModuleKind.PLANNING,
        prose_name="Impossible Action",
        definition="Plans a step that is physically/logically impossible given current preconditions.",
    ),
    ErrorType(
        id="inefficient_planning",
        module=ModuleKind.PLANNING,
        prose_name="Inefficient Planning",
        definition="Plan is overly long or illogical; wastes steps and risks hitting limits.",
    ),
    # Action
    ErrorType(
        id="planning_action_disconnect",
        module=ModuleKind.ACTION,
        prose_name="Planning--Action Disconnect",
        definition="Chosen actions do not align with the stated plan intent.",
        aliases=("plan_action_disconnect",),
    ),
    ErrorType(
        id="format_error",
        module=ModuleKind.ACTION,
        prose_name="Format Error",
        definition="Produces syntactically invalid actions.",
    ),
    ErrorType(
        id="parameter_error",
        module=ModuleKind.ACTION,
        prose_name="Parameter Error",
        definition="Generates unreasonable or malformed parameters.",
    ),
    # System
    ErrorType(
        id="step_limit",
        module=ModuleKind.SYSTEM,
        prose_name="Step Limit Exhaustion",
        definition="Fails due to reaching the maximum step cap despite reasonable behavior.",
        aliases=("step_limit_exhaustion",),
    ),
    ErrorType(
        id="tool_execution_error",
        module=ModuleKind.SYSTEM,
        prose_name="Tool Execution Error",
        definition="External tool/API misbehaves or errors, causing downstream failures.",
    ),
    ErrorType(
        id="llm_limit",
        module=ModuleKind.SYSTEM,
        prose_name="LLM Limit",
        definition="Fails due to API/model constraints (e.g., timeouts, token limits).",
    ),
    ErrorType(
        id="environment_error",
        module=ModuleKind.SYSTEM,
        prose_name="Environment Error",
        definition="Simulator/environment breaks expected rules (bug/crash/network), not agent’s fault.",
    ),
    # Others
    ErrorType(
        id=OTHER_ERROR,
        module=ModuleKind.OTHERS,
        prose_name="Other",
        definition="Unusual failure not covered by the standard error types.",
        aliases=("others",),
    ),
)

_SEPARATORS_RE = re.compile(r"[^a-z0-9]+")


def normalize_label_text(text: str) -> str:
    """Lower-case and unify spaces, hyphens, slashes and punctuation to underscores."""
    return _SEPARATORS_RE.sub("_", text.strip().lower()).strip("_")


def _build_alias_index() -> dict[str, tuple[ErrorType, ...]]:
    index: dict[str, list[ErrorType]] = {}
    for entry in CATALOG:
        keys = {entry.id, normalize_label_text(entry.prose_name), *entry.aliases}
        for key in keys:
            index.setdefault(normalize_label_text(key), []).append(entry)
    return {key: tuple(entries) for key, entries in index.items()}


_ALIAS_INDEX = _build_alias_index()


def catalog_entries(error_type_id: str) -> tuple[ErrorType, ...]:
    """All catalog entries carrying this exact id (hallucination has two)."""
    return tuple(entry for entry in CATALOG if entry.id == error_type_id)


def error_types_for(module: ModuleKind) -> list[ErrorType]:
    """Catalog entries of one module, in catalog order."""
    return [entry for entry in CATALOG if entry.module == module]


def all_error_types() -> list[ErrorType]:
    """The leaf error types across the five reasoning and system modules."""
    return [entry for entry in CATALOG if entry.module != ModuleKind.OTHERS]


def parse_module(module_text: str) -> ModuleKind:
    """Parse free-form module text such as 'Planning' or 'memory module'."""
    key = normalize_label_text(module_text)
    key = key.removesuffix("_module")
    aliases = {"plan": ModuleKind.PLANNING, "other": ModuleKind.OTHERS}
    if key in aliases:
        return aliases[key]
    try:
        return ModuleKind(key)
    except ValueError:
        raise UnknownErrorType(f"Unknown module '{module_text}'") from None


def parse_error_label(module_text: str, type_text: str) -> ErrorLabel:
    """
    Map raw judge output onto the closed catalog.

    Args:
        module_text: Module name as written by the model
        type_text: Error type as written by the model (id or prose name)

    Returns:
        ErrorLabel within the catalog

    Raises:
        UnknownErrorType: If either text matches nothing in the catalog
        ModuleMismatch: If the type exists but only under other modules
    """
    module = parse_module(module_text)
    key = normalize_label_text(type_text)

    if key == NO_ERROR:
        return ErrorLabel(module=module, error_type=NO_ERROR)
    if key in (OTHER_ERROR, "others"):
        return ErrorLabel(module=module, error_type=OTHER_ERROR)

    entries = _ALIAS_INDEX.get(key)
    if not entries:
        raise UnknownErrorType(f"Unknown error type '{type_text}'")

    for entry in entries:
        if entry.module == module:
            return ErrorLabel(module=module, error_type=entry.id)

    owners = ", ".join(sorted({str(e.module) for e in entries}))
    raise ModuleMismatch(f"Error type '{type_text}' belongs to {owners}, not {module}")


def render_error_definitions(scope: Optional[ModuleKind] = None) -> str:
    """
    Render the error definitions block injected into judge prompts.

    Args:
        scope: One module, or None for the whole catalog

    Returns:
        Deterministic text grouped by module, ending with the no_error sentinel
    """
    modules = [scope] if scope is not None else [
        ModuleKind.MEMORY,
        ModuleKind.REFLECTION,
        ModuleKind.PLANNING,
        ModuleKind.ACTION,
        ModuleKind.SYSTEM,
    ]

    lines = ["ERROR TYPE DEFINITIONS:"]
    for module in modules:
        entries = [e for e in error_types_for(module) if e.id != OTHER_ERROR]
        if not entries:
            continue
        lines.append("")
        lines.append(f"{module.upper()} MODULE ERRORS:")
        for entry in entries:
            lines.append(f"- {entry.id} ({entry.prose_name}): {entry.definition}")
    lines.append("")
    lines.append(f"- {NO_ERROR}: {NO_ERROR_DEFINITION}")
    return "\n".join(lines)


def catalog_document() -> dict[str, Any]:
    """Versioned JSON document for external annotation tools."""
    modules: dict[str, list[dict[str, str]]] = {}
    for entry in CATALOG:
        modules.setdefault(str(entry.module), []).append(
            {"id": entry.id, "prose_name": entry.prose_name, "definition": entry.definition}
        )
    return {"version": CATALOG_VERSION, "modules": modules}
