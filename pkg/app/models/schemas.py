"""Pydantic models for trajectories, model calls, environments, diagnoses and metrics"""

import csv
import io
import json
import re
from enum import IntEnum

try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):
        def __str__(self) -> str:
            return str(self.value)

        def __format__(self, format_spec: str) -> str:
            return str(self.value).__format__(format_spec)
from typing import Annotated, Any, Literal, Optional, Union

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    NonNegativeInt,
    PositiveInt,
    field_validator,
    model_validator,
)

_IDENTIFIER_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.\-]*$")


def collapse_whitespace(text: str) -> str:
    """Trim and collapse internal whitespace runs to single spaces."""
    return " ".join(text.split())


class FrozenModel(BaseModel):
    """Immutable value object shared by every domain type"""
    model_config = ConfigDict(frozen=True, populate_by_name=True, serialize_by_alias=True)


# ============================================================================
# Taxonomy Models
# ============================================================================

class ModuleKind(StrEnum):
    """Reasoning phase a step output or error belongs to"""
    MEMORY = "memory"
    REFLECTION = "reflection"
    PLANNING = "planning"
    ACTION = "action"
    SYSTEM = "system"
    OTHERS = "others"


REASONING_MODULES = (
    ModuleKind.MEMORY,
    ModuleKind.REFLECTION,
    ModuleKind.PLANNING,
    ModuleKind.ACTION,
)

NO_ERROR = "no_error"
OTHER_ERROR = "other"


class ErrorType(FrozenModel):
    """Catalog entry for one leaf error type"""
    id: str = Field(..., description="snake_case id used in JSON")
    module: ModuleKind
    prose_name: str = Field(..., description="Name as quoted in prompts")
    definition: str
    aliases: tuple[str, ...] = ()


class ErrorLabel(FrozenModel):
    """Module plus error type id, validated against the closed catalog"""
    model_config = ConfigDict(
        json_schema_extra={"example": {"module": "planning", "error_type": "inefficient_planning"}}
    )

    module: ModuleKind = Field(..., description="Module the error is attributed to")
    error_type: str = Field(..., description="Catalog id such as 'constraint_ignorance' or 'no_error'")

    @model_validator(mode="after")
    def _check_catalog(self) -> "ErrorLabel":
        if self.error_type in (NO_ERROR, OTHER_ERROR):
            return self
        # Imported here: the catalog module imports ModuleKind from this file
        from app.services.taxonomy import catalog_entries

        entries = catalog_entries(self.error_type)
        if not entries:
            raise ValueError(f"unknown error type '{self.error_type}'")
        if all(e.module != self.module for e in entries):
            raise ValueError(
                f"error type '{self.error_type}' does not belong to module '{self.module}'"
            )
        return self

    @property
    def is_error(self) -> bool:
        return self.error_type != NO_ERROR

    def __str__(self) -> str:
        return f"{self.module}/{self.error_type}"


# ============================================================================
# Action Models
# ============================================================================

class EnvAction(FrozenModel):
    """Free-text environment command such as 'go to cabinet 1'"""
    kind: Literal["env_action"] = "env_action"
    text: str = Field(..., description="Whitespace-normalized command text")

    @field_validator("text")
    @classmethod
    def _normalize_text(cls, value: str) -> str:
        value = collapse_whitespace(value)
        if not value:
            raise ValueError("env_action text must not be empty")
        return value

    def describe(self) -> str:
        return self.text


class ToolCall(FrozenModel):
    """Named tool invocation parsed from an action tag"""
    kind: Literal["tool_call"] = "tool_call"
    name: str = Field(..., description="Tool identifier")
    parameters: dict[str, Any] = Field(default_factory=dict, description="Tool arguments")

    @field_validator("name")
    @classmethod
    def _check_name(cls, value: str) -> str:
        value = value.strip()
        if not _IDENTIFIER_RE.match(value):
            raise ValueError(f"tool name '{value}' is not an identifier")
        return value

    def describe(self) -> str:
        return f"{self.name} {_compact_json(self.parameters)}"


class FinalAnswer(FrozenModel):
    """Terminal answer emitted inside <answer> tags"""
    kind: Literal["final_answer"] = "final_answer"
    text: str

    def describe(self) -> str:
        return f"answer: {self.text}"


class InvalidAction(FrozenModel):
    """Completion that did not yield a usable action; raw text kept for detection"""
    kind: Literal["invalid"] = "invalid"
    raw: str

    def describe(self) -> str:
        return f"invalid: {collapse_whitespace(self.raw)[:80]}"


CanonicalAction = Annotated[
    Union[EnvAction, ToolCall, FinalAnswer, InvalidAction],
    Field(discriminator="kind"),
]


def _compact_json(value: Any) -> str:
    return json.dumps(value, sort_keys=True, ensure_ascii=False)


# ============================================================================
# Trajectory Models
# ============================================================================

class OutcomeStatus(StrEnum):
    SUCCESS = "success"
    FAILURE = "failure"
    SYSTEM_HALT = "system_halt"


class HaltReason(StrEnum):
    """System halt reasons; ids match the system error types"""
    STEP_LIMIT = "step_limit"
    TOOL_EXECUTION_ERROR = "tool_execution_error"
    LLM_LIMIT = "llm_limit"
    ENVIRONMENT_ERROR = "environment_error"


class Outcome(FrozenModel):
    """Final result of an episode"""
    status: OutcomeStatus
    reason: Optional[HaltReason] = None

    @model_validator(mode="after")
    def _reason_only_for_halts(self) -> "Outcome":
        if (self.status == OutcomeStatus.SYSTEM_HALT) != (self.reason is not None):
            raise ValueError("reason is required for system_halt and forbidden otherwise")
        return self

    @classmethod
    def success(cls) -> "Outcome":
        return cls(status=OutcomeStatus.SUCCESS)

    @classmethod
    def failure(cls) -> "Outcome":
        return cls(status=OutcomeStatus.FAILURE)

    @classmethod
    def halted(cls, reason: HaltReason) -> "Outcome":
        return cls(status=OutcomeStatus.SYSTEM_HALT, reason=reason)

    @property
    def is_success(self) -> bool:
        return self.status == OutcomeStatus.SUCCESS

    def __str__(self) -> str:
        return f"{self.status}({self.reason})" if self.reason else str(self.status)


class TokenUsage(FrozenModel):
    """Prompt and completion token counts"""
    prompt_tokens: NonNegativeInt = Field(0, alias="prompt")
    completion_tokens: NonNegativeInt = Field(0, alias="completion")

    @property
    def total(self) -> int:
        return self.prompt_tokens + self.completion_tokens

    @classmethod
    def zero(cls) -> "TokenUsage":
        return cls(prompt_tokens=0, completion_tokens=0)

    def __add__(self, other: "TokenUsage") -> "TokenUsage":
        return TokenUsage(
            prompt_tokens=self.prompt_tokens + other.prompt_tokens,
            completion_tokens=self.completion_tokens + other.completion_tokens,
        )

    def __sub__(self, other: "TokenUsage") -> "TokenUsage":
        return TokenUsage(
            prompt_tokens=self.prompt_tokens - other.prompt_tokens,
            completion_tokens=self.completion_tokens - other.completion_tokens,
        )


class StrategyId(StrEnum):
    """Agent prompting strategy; selects which module tags the agent emits"""
    MODULAR = "modular"
    REACT = "react"
    REFLECTION = "reflection"
    ACT_ONLY = "act_only"
    MEMORY_REACT = "memory_react"


STRATEGY_MODULES: dict[StrategyId, tuple[ModuleKind, ...]] = {
    StrategyId.MODULAR: REASONING_MODULES,
    StrategyId.REACT: (ModuleKind.PLANNING, ModuleKind.ACTION),
    StrategyId.REFLECTION: (ModuleKind.REFLECTION, ModuleKind.PLANNING, ModuleKind.ACTION),
    StrategyId.ACT_ONLY: (ModuleKind.ACTION,),
    StrategyId.MEMORY_REACT: (ModuleKind.MEMORY, ModuleKind.PLANNING, ModuleKind.ACTION),
}


def modules_for_step(strategy: StrategyId, index: int) -> tuple[ModuleKind, ...]:
    """Modules a step emits; the first step has no history to recall or reflect on."""
    modules = STRATEGY_MODULES[strategy]
    if index == 1:
        return tuple(m for m in modules if m not in (ModuleKind.MEMORY, ModuleKind.REFLECTION))
    return modules


class Feedback(FrozenModel):
    """Guidance injected into re-rollout prompts from the target step onward"""
    target_step: PositiveInt = Field(..., description="First step that receives the guidance")
    error_label: ErrorLabel
    guidance: str
    attempt_index: PositiveInt = 1
    prior_guidance: tuple[str, ...] = ()

    @model_validator(mode="after")
    def _history_matches_attempt(self) -> "Feedback":
        if len(self.prior_guidance) != self.attempt_index - 1:
            raise ValueError("prior_guidance must hold one entry per earlier attempt")
        return self


class StepRecord(FrozenModel):
    """One agent step: what it saw, what it wrote, what it did, what came back"""
    index: PositiveInt
    observation: str = Field(..., description="Observation before the action")
    admissible_actions: Optional[tuple[str, ...]] = None
    module_outputs: dict[ModuleKind, str] = Field(default_factory=dict)
    action: CanonicalAction
    env_response: str = Field(..., description="Observation after the action")
    raw_completion: str = ""
    token_usage: TokenUsage = Field(default_factory=TokenUsage.zero)

    @field_validator("module_outputs")
    @classmethod
    def _reasoning_keys_only(cls, value: dict[ModuleKind, str]) -> dict[ModuleKind, str]:
        for key in value:
            if key not in REASONING_MODULES:
                raise ValueError(f"module_outputs may not contain '{key}'")
        return value


class Trajectory(FrozenModel):
    """Ordered record of one agent episode; outcome is None only while building"""
    schema_version: int = 1
    task_id: str
    env_name: str
    task_description: str
    strategy: StrategyId
    model_id: str
    seed: int = 0
    step_cap: Optional[PositiveInt] = None
    steps: tuple[StepRecord, ...] = ()
    outcome: Optional[Outcome] = None
    feedback_applied: Optional[Feedback] = None

    @property
    def trajectory_id(self) -> str:
        return self.task_id

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def is_success(self) -> bool:
        return self.outcome is not None and self.outcome.is_success

    def step(self, index: int) -> StepRecord:
        return self.steps[index - 1]


class TrajectoryPrefix(FrozenModel):
    """Steps strictly before a cut point, plus the task metadata needed to resume"""
    task_id: str
    env_name: str
    task_description: str
    strategy: StrategyId
    model_id: str
    seed: int = 0
    step_cap: Optional[PositiveInt] = None
    steps: tuple[StepRecord, ...] = ()

    @property
    def length(self) -> int:
        return len(self.steps)


class Violation(FrozenModel):
    """A broken trajectory invariant"""
    step: Optional[int] = None
    rule: str
    message: str = ""

    def __str__(self) -> str:
        return f"[{self.rule}@{self.step}]" if self.step is not None else f"[{self.rule}]"


# ============================================================================
# Model Gateway Models
# ============================================================================

class ChatRole(StrEnum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


class ChatMessage(FrozenModel):
    role: ChatRole
    content: str


class ChatRequest(FrozenModel):
    """Chat-completion request sent to either backend"""
    model_id: str
    messages: tuple[ChatMessage, ...] = Field(..., min_length=1)
    temperature: float = Field(0.0, ge=0.0)
    max_output_tokens: Optional[PositiveInt] = None
    seed: Optional[int] = None

    @classmethod
    def single(cls, model_id: str, prompt: str, **kwargs) -> "ChatRequest":
        return cls(model_id=model_id, messages=(ChatMessage(role=ChatRole.USER, content=prompt),), **kwargs)

    @property
    def prompt_text(self) -> str:
        return "\n".join(m.content for m in self.messages)


class BackendKind(StrEnum):
    LIVE = "live"
    SCRIPTED = "scripted"


class Completion(FrozenModel):
    text: str
    usage: TokenUsage
    backend: BackendKind


class RolloutConfig(FrozenModel):
    """Per-episode agent settings"""
    strategy: StrategyId = StrategyId.MODULAR
    history_window: PositiveInt = 10
    step_cap: PositiveInt = 30
    model_id: str = "scripted"
    temperature: float = Field(0.0, ge=0.0)
    template_set: str = "gridworld"
    obs_char_limit: PositiveInt = 300
    full_history_last_step: bool = False


# ============================================================================
# Environment Models
# ============================================================================

class EnvDescriptor(FrozenModel):
    env_name: str
    task_id: str
    task_description: str
    step_cap: PositiveInt
    deterministic: bool = True
    seed: int = 0


class ActionResult(FrozenModel):
    """Environment answer to reset() or step()"""
    observation: str
    admissible_actions: Optional[tuple[str, ...]] = None
    done: bool = False
    success: Optional[bool] = None
    invalid_action: bool = False

    @model_validator(mode="after")
    def _success_iff_done(self) -> "ActionResult":
        if self.done != (self.success is not None):
            raise ValueError("success must be set exactly when done")
        return self


class ContainerSpec(FrozenModel):
    name: str
    openable: bool = False
    contents: tuple[str, ...] = ()


class LocationSpec(FrozenModel):
    name: str
    containers: tuple[ContainerSpec, ...] = ()


class GoalSpec(FrozenModel):
    object: str
    receptacle: str


class WorldSpec(FrozenModel):
    """Grid text-world layout and goal"""
    task_id: str = "gridworld-task"
    task_description: Optional[str] = None
    locations: tuple[LocationSpec, ...] = Field(..., min_length=1)
    goal: GoalSpec
    start_location: str
    seed: int = 0

    @model_validator(mode="after")
    def _check_world(self) -> "WorldSpec":
        location_names = [loc.name for loc in self.locations]
        if len(set(location_names)) != len(location_names):
            raise ValueError("location names must be unique")
        if self.start_location not in location_names:
            raise ValueError(f"start location '{self.start_location}' is not a location")
        containers = [c.name for loc in self.locations for c in loc.containers]
        if len(set(containers)) != len(containers):
            raise ValueError("container names must be unique")
        objects = [o for loc in self.locations for c in loc.containers for o in c.contents]
        if len(set(objects)) != len(objects):
            raise ValueError("object names must be unique")
        if self.goal.object not in objects:
            raise ValueError(f"goal object '{self.goal.object}' is not placed anywhere")
        if self.goal.receptacle not in containers:
            raise ValueError(f"goal receptacle '{self.goal.receptacle}' does not exist")
        return self

    @property
    def description(self) -> str:
        return self.task_description or f"put {self.goal.object} in {self.goal.receptacle}."


# ============================================================================
# Debug Pipeline Models
# ============================================================================

class ErrorDetection(FrozenModel):
    """Per-step, per-module judgment"""
    step: PositiveInt
    module: ModuleKind
    error_detected: bool
    error_label: ErrorLabel
    evidence: str = ""
    reasoning: str = ""

    @model_validator(mode="after")
    def _flag_matches_label(self) -> "ErrorDetection":
        if self.error_detected != self.error_label.is_error:
            raise ValueError("error_detected must be false exactly when the label is no_error")
        if self.error_label.module != self.module:
            raise ValueError("label module must match detection module")
        return self


class ErrorProfile(FrozenModel):
    trajectory_id: str
    detections: tuple[ErrorDetection, ...] = ()

    @model_validator(mode="after")
    def _unique_pairs(self) -> "ErrorProfile":
        seen = set()
        for detection in self.detections:
            key = (detection.step, detection.module)
            if key in seen:
                raise ValueError(f"duplicate detection for step {key[0]} module {key[1]}")
            if detection.step == 1 and detection.module in (ModuleKind.MEMORY, ModuleKind.REFLECTION):
                raise ValueError("step 1 cannot carry memory or reflection detections")
            seen.add(key)
        return self

    @property
    def max_step(self) -> int:
        return max((d.step for d in self.detections), default=0)

    def errors_at(self, step: int) -> list[ErrorDetection]:
        return [d for d in self.detections if d.step == step and d.error_detected]


class CascadingEffect(FrozenModel):
    step: PositiveInt
    impact: str = ""


class CriticalDiagnosis(FrozenModel):
    """Earliest critical error and the guidance that seeds re-rollout"""
    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "trajectory_id": "mug-task",
                "critical_step": 3,
                "critical_module": "planning",
                "error_label": {"module": "planning", "error_type": "inefficient_planning"},
                "root_cause": "Agent keeps searching cabinets instead of the countertop",
                "evidence": "Step 3 plan: check cabinet 2 again",
                "correction_guidance": "Go to countertop 1 where the mug is visible",
                "cascading_effects": [{"step": 4, "impact": "loop between cabinets"}],
            }
        }
    )

    trajectory_id: Optional[str] = None
    critical_step: PositiveInt
    critical_module: ModuleKind
    error_label: ErrorLabel
    root_cause: str = ""
    evidence: str = ""
    correction_guidance: str = ""
    cascading_effects: tuple[CascadingEffect, ...] = ()

    @model_validator(mode="after")
    def _consistent(self) -> "CriticalDiagnosis":
        if self.error_label.module != self.critical_module:
            raise ValueError("error_label module must equal critical_module")
        for effect in self.cascading_effects:
            if effect.step < self.critical_step:
                raise ValueError(
                    f"cascading effect at step {effect.step} precedes critical step {self.critical_step}"
                )
        return self


class DebugAttempt(FrozenModel):
    feedback: Optional[Feedback] = None
    trajectory: Trajectory


class DebugResult(FrozenModel):
    """Outcome of a debugging or comparison method on one task"""
    method: str = "debug"
    initial: Trajectory
    diagnosis: Optional[CriticalDiagnosis] = None
    attempts: tuple[DebugAttempt, ...] = ()
    final_outcome: Outcome
    total_usage: TokenUsage = Field(default_factory=TokenUsage.zero)

    @model_validator(mode="after")
    def _final_matches_last(self) -> "DebugResult":
        expected = self.attempts[-1].trajectory.outcome if self.attempts else self.initial.outcome
        if expected != self.final_outcome:
            raise ValueError("final_outcome must equal the last attempt's outcome")
        return self

    @property
    def task_id(self) -> str:
        return self.initial.task_id

    def success_attempt(self) -> Optional[int]:
        """0 for an initial success, k for the first successful attempt, None otherwise."""
        if self.initial.is_success:
            return 0
        for k, attempt in enumerate(self.attempts, start=1):
            if attempt.trajectory.is_success:
                return k
        return None


class ProbeRecord(FrozenModel):
    step: PositiveInt
    action: CanonicalAction
    success: bool


class LocalizationResult(FrozenModel):
    """Counterfactual localization result with every probe it ran"""
    critical_step: PositiveInt
    diagnosis: CriticalDiagnosis
    probes: tuple[ProbeRecord, ...] = ()

    @property
    def probe_count(self) -> int:
        return len(self.probes)


# ============================================================================
# Evaluation Models
# ============================================================================

class GoldAnnotation(FrozenModel):
    trajectory_id: str
    critical_step: PositiveInt
    module: ModuleKind
    error_label: ErrorLabel
    notes: str = ""

    @model_validator(mode="after")
    def _label_module(self) -> "GoldAnnotation":
        if self.error_label.module != self.module:
            raise ValueError("error_label module must equal module")
        return self


class BenchmarkItem(FrozenModel):
    dataset: str
    trajectory: Trajectory
    annotation: GoldAnnotation


class MatchLevel(StrEnum):
    NONE = "none"
    STEP = "step"
    STEP_MODULE = "step_module"
    ALL = "all"

    @property
    def rank(self) -> int:
        return ("none", "step", "step_module", "all").index(self.value)

    def reaches(self, other: "MatchLevel") -> bool:
        return self.rank >= other.rank


class DetectionMetrics(FrozenModel):
    step_acc: float = Field(..., ge=0.0, le=1.0)
    step_module_acc: float = Field(..., ge=0.0, le=1.0)
    all_acc: float = Field(..., ge=0.0, le=1.0)
    error_only_acc: float = Field(..., ge=0.0, le=1.0)
    n: PositiveInt

    @model_validator(mode="after")
    def _nested(self) -> "DetectionMetrics":
        if not (self.all_acc <= self.step_module_acc <= self.step_acc):
            raise ValueError("accuracies must nest: all <= step_module <= step")
        return self


class SeverityCode(IntEnum):
    CLEAN = 0
    ERROR = 1
    FIRST_CRITICAL = 2
    POST_CRITICAL = 3


class PropagationMatrix(FrozenModel):
    """Per-trajectory, per-step severity grid"""
    trajectory_ids: tuple[str, ...]
    n_columns: NonNegativeInt
    rows: tuple[tuple[SeverityCode, ...], ...]

    @model_validator(mode="after")
    def _check_rows(self) -> "PropagationMatrix":
        if len(self.rows) != len(self.trajectory_ids):
            raise ValueError("one row per trajectory id")
        for trajectory_id, row in zip(self.trajectory_ids, self.rows):
            if len(row) != self.n_columns:
                raise ValueError(f"row {trajectory_id} has {len(row)} cells, expected {self.n_columns}")
            firsts = [i for i, code in enumerate(row) if code == SeverityCode.FIRST_CRITICAL]
            if len(firsts) > 1:
                raise ValueError(f"row {trajectory_id} has more than one first_critical cell")
            first = firsts[0] if firsts else len(row)
            if any(code == SeverityCode.POST_CRITICAL for code in row[: first + 1]):
                raise ValueError(f"row {trajectory_id} has post_critical before its first_critical")
        return self

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["trajectory_id"] + [f"step_{i}" for i in range(1, self.n_columns + 1)])
        for trajectory_id, row in zip(self.trajectory_ids, self.rows):
            writer.writerow([trajectory_id] + [int(code) for code in row])
        return buffer.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "PropagationMatrix":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        ids, rows = [], []
        for record in reader:
            if not record:
                continue
            ids.append(record[0])
            rows.append(tuple(SeverityCode(int(cell)) for cell in record[1:]))
        return cls(trajectory_ids=tuple(ids), n_columns=len(header) - 1, rows=tuple(rows))
