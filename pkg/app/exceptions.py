"""Exception hierarchy for the trajectory debugger.

Every error raised on purpose by the package derives from DebuggerError and
may carry the task id and step it concerns. Subclasses are grouped by the
layer that raises them so callers can catch a whole layer at once.
"""

from typing import Optional


class DebuggerError(Exception):
    """Base exception for all trajectory debugger errors."""

    def __init__(
        self,
        message: str,
        *,
        task_id: Optional[str] = None,
        step: Optional[int] = None,
    ):
        self.task_id = task_id
        self.step = step
        super().__init__(message)


class InvalidConfigError(DebuggerError):
    """Run configuration is missing, malformed, or inconsistent."""


# --- Trajectory model errors ---


class TrajectoryError(DebuggerError):
    """Base for trajectory construction and serialization failures."""


class SchemaViolation(TrajectoryError):
    """A document does not match the expected schema."""

    def __init__(self, path: str, message: str = "", **context):
        self.path = path
        super().__init__(f"{path}: {message}" if message else path, **context)


class IndexGap(TrajectoryError):
    """A step index does not continue the trajectory contiguously."""


class ModuleRuleViolation(TrajectoryError):
    """A step carries module outputs its position does not allow."""


class OutOfRange(TrajectoryError):
    """A step position lies outside the trajectory."""


class TrajectoryFinalized(TrajectoryError):
    """Attempted to extend a trajectory that already has an outcome."""


# --- Taxonomy errors ---


class TaxonomyError(DebuggerError):
    """Base for error-label parsing failures."""


class UnknownErrorType(TaxonomyError):
    """Text does not name any error type in the catalog."""


class ModuleMismatch(TaxonomyError):
    """Error type belongs to a different module than the one given."""


# --- Model gateway errors ---


class GatewayError(DebuggerError):
    """Base for model gateway failures."""


class ModelUnavailableError(GatewayError):
    """The model could not produce a completion."""


class TransportError(ModelUnavailableError):
    """Live endpoint failed after all retries."""


class ScriptExhausted(ModelUnavailableError):
    """Scripted backend has no response left for this call."""


class BudgetExceeded(ModelUnavailableError):
    """Armed token budget would be surpassed by this call."""


class TemplateError(GatewayError):
    """Base for prompt template failures."""


class MissingPlaceholder(TemplateError):
    """A template slot has no binding."""

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"Missing binding for placeholder '{name}'")


class UnknownPlaceholder(TemplateError):
    """A binding names a slot the template does not have."""

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"Binding '{name}' matches no placeholder in template")


class TemplateSyntaxError(TemplateError):
    """A template body has a stray brace or malformed slot."""


class JsonExtractionError(GatewayError):
    """Base for JSON extraction failures on model output."""


class NoJsonFound(JsonExtractionError):
    """Text contains no JSON object or array opener."""


class UnbalancedBraces(JsonExtractionError):
    """A JSON block was opened but never closed."""


class ParseFailure(JsonExtractionError):
    """A balanced block could not be parsed even after repair."""


# --- Environment errors ---


class EnvHarnessError(DebuggerError):
    """Base for environment harness failures."""


class InvalidWorldSpec(EnvHarnessError):
    """A world description is inconsistent."""


class SteppedAfterDone(EnvHarnessError):
    """step() called on an episode that already ended."""


class ReplayDivergence(EnvHarnessError):
    """Replayed action produced a result that differs from the record."""


class NonDeterministicEnv(EnvHarnessError):
    """Prefix replay requested on a non-deterministic environment."""


class NotFinished(EnvHarnessError):
    """Outcome requested before the episode ended."""


# --- Debug pipeline errors ---


class PipelineError(DebuggerError):
    """Base for detection, localization, and re-rollout failures."""


class JudgeParseFailure(PipelineError):
    """Judge output could not be parsed into the expected structure."""


class InvalidDiagnosis(PipelineError):
    """Judge produced a diagnosis that violates its invariants."""


class LineFormatParseFailure(PipelineError):
    """A step/reason/suggestion reply is missing a required line."""


class CriticalStepNotFound(PipelineError):
    """No step could be identified as the critical error."""


class ScoreParseFailure(PipelineError):
    """Value reply is not a numeric array aligned to the candidates."""


class PreconditionViolation(PipelineError):
    """Operation called on input its contract does not accept."""


# --- Evaluation errors ---


class EvaluationError(DebuggerError):
    """Base for metric and benchmark failures."""


class EmptySet(EvaluationError):
    """Aggregate requested over no items."""


class IdMismatch(EvaluationError):
    """Prediction and gold annotation refer to different trajectories."""


class InconsistentIds(EvaluationError):
    """Profiles and diagnoses do not pair up one-to-one."""
