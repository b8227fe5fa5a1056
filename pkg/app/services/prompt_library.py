"""Loading of prompt template files shipped in app/prompts"""

import logging
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import yaml
from pydantic import Field, ValidationError

from app.exceptions import TemplateError, TemplateSyntaxError
from app.models.schemas import FrozenModel, ModuleKind
from app.utils.prompts import PromptTemplate

# Configure logging
logger = logging.getLogger(__name__)

PROMPTS_DIR = Path(__file__).resolve().parent.parent / "prompts"
ROLLOUT_DIR = PROMPTS_DIR / "rollout"

FEEDBACK_SLOT = "debug_feedback"

# Template set ids that reuse another set's text
TEMPLATE_SET_ALIASES = {"gridworld": "alfworld", "replay": "alfworld"}


class TemplateVariant(FrozenModel):
    """One rollout prompt variant split into a head and per-module tag sections"""
    placeholders: frozenset[str]
    head: str
    sections: dict[ModuleKind, str] = Field(default_factory=dict)


class TemplateSet(FrozenModel):
    """Rollout prompt variants for one environment family"""
    id: str
    env_type: str
    action_binding: str
    variants: dict[str, TemplateVariant]

    def compose(
        self,
        variant_name: str,
        modules: Sequence[ModuleKind],
        with_feedback: bool = False,
    ) -> PromptTemplate:
        """
        Build the step template for a variant and module set.

        Args:
            variant_name: "no_history", "history" or "last_step"
            modules: Modules whose tag instructions are included, in order
            with_feedback: Insert the {debug_feedback} slot after the head

        Returns:
            PromptTemplate whose slots are the variant's placeholders,
            plus debug_feedback when requested
        """
        if variant_name not in self.variants:
            raise TemplateError(f"Template set '{self.id}' has no variant '{variant_name}'")
        variant = self.variants[variant_name]

        parts = [variant.head]
        if with_feedback:
            parts.append("{" + FEEDBACK_SLOT + "}")
        parts.extend(variant.sections[m] for m in modules if m in variant.sections)
        return PromptTemplate.from_body(f"{self.id}.{variant_name}", "\n\n".join(parts))


def _check_variant(set_id: str, name: str, variant: TemplateVariant) -> None:
    # Optional sections may be dropped by a strategy, so only head and action carry slots
    head_slots = PromptTemplate.from_body(f"{set_id}.{name}.head", variant.head).required_placeholders
    found = set(head_slots)
    for module, text in variant.sections.items():
        slots = PromptTemplate.from_body(f"{set_id}.{name}.{module}", text).required_placeholders
        if slots and module != ModuleKind.ACTION:
            raise TemplateSyntaxError(
                f"Template '{set_id}.{name}' section '{module}' may not hold placeholders: {sorted(slots)}"
            )
        found |= slots
    if found != variant.placeholders:
        raise TemplateSyntaxError(
            f"Template '{set_id}.{name}' declares {sorted(variant.placeholders)} "
            f"but uses {sorted(found)}"
        )


@lru_cache(maxsize=None)
def load_template_set(set_id: str) -> TemplateSet:
    """
    Load and check a rollout template set.

    Args:
        set_id: alfworld, webshop, gaia, or an alias such as gridworld

    Returns:
        Parsed TemplateSet

    Raises:
        TemplateError: If the file is missing or malformed
    """
    file_id = TEMPLATE_SET_ALIASES.get(set_id, set_id)
    path = ROLLOUT_DIR / f"{file_id}.yaml"
    if not path.exists():
        raise TemplateError(f"Unknown template set '{set_id}'")

    with open(path, "r", encoding="utf-8") as f:
        raw = yaml.safe_load(f)

    try:
        template_set = TemplateSet(**raw)
    except (TypeError, ValidationError) as e:
        raise TemplateError(f"Template set file {path.name} is malformed: {e}") from e

    for name, variant in template_set.variants.items():
        _check_variant(template_set.id, name, variant)

    logger.debug("Loaded template set %s (%d variants)", template_set.id, len(template_set.variants))
    return template_set


@lru_cache(maxsize=None)
def load_prompt(name: str) -> PromptTemplate:
    """Load a single-file prompt such as 'detector' or 'critical_analysis'."""
    path = PROMPTS_DIR / f"{name}.txt"
    if not path.exists():
        raise TemplateError(f"Unknown prompt '{name}'")
    body = path.read_text(encoding="utf-8")
    return PromptTemplate.from_body(name, body)


def available_template_sets() -> list[str]:
    names = sorted(p.stem for p in ROLLOUT_DIR.glob("*.yaml"))
    return names + sorted(TEMPLATE_SET_ALIASES)


def template_set_for(env_name: str) -> str:
    """Template set used for an environment; unknown names get the household set."""
    if env_name in TEMPLATE_SET_ALIASES or (ROLLOUT_DIR / f"{env_name}.yaml").exists():
        return env_name
    return "alfworld"


def env_type_for(env_name: Optional[str]) -> str:
    """Human-readable environment name used in judge and search prompts."""
    if env_name is None:
        return "a text environment"
    return load_template_set(template_set_for(env_name)).env_type
