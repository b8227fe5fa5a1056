"""Benchmark ingestion, detection accuracy, success curves and error propagation"""

import json
import logging
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

from pydantic import ValidationError

from app.exceptions import EmptySet, IdMismatch, InconsistentIds, SchemaViolation
from app.models.schemas import (
    BenchmarkItem,
    CriticalDiagnosis,
    DebugResult,
    DetectionMetrics,
    ErrorProfile,
    GoldAnnotation,
    MatchLevel,
    PropagationMatrix,
    SeverityCode,
)
from app.services.trajectory_service import trajectory_from_data, validate
from app.utils.formatting import format_percent, format_table

# Configure logging
logger = logging.getLogger(__name__)

ACCURACY_FIELDS = ("step_acc", "step_module_acc", "all_acc", "error_only_acc")
TABLE_COLUMNS = (("S", "step_acc"), ("S+M", "step_module_acc"), ("ALL", "all_acc"))

Averager = Callable[[Sequence[DetectionMetrics]], DetectionMetrics]


# ============================================================================
# Benchmark ingestion
# ============================================================================

def _annotation_path(index: int, error: ValidationError) -> str:
    first = error.errors()[0]
    suffix = ".".join(str(part) for part in first["loc"])
    return f"[{index}].annotation" + (f".{suffix}" if suffix else "")


def _load_item(index: int, entry) -> BenchmarkItem:
    if not isinstance(entry, dict):
        raise SchemaViolation(f"[{index}]", "expected an object with trajectory and annotation")
    for key in ("trajectory", "annotation"):
        if key not in entry:
            raise SchemaViolation(f"[{index}].{key}", "field required")

    try:
        trajectory = trajectory_from_data(entry["trajectory"])
    except SchemaViolation as e:
        raise SchemaViolation(f"[{index}].trajectory.{e.path}", str(e)) from e
    violations = validate(trajectory)
    if violations:
        raise SchemaViolation(
            f"[{index}].trajectory.steps", ", ".join(str(v) for v in violations), task_id=trajectory.task_id
        )

    raw_annotation = entry["annotation"]
    if not isinstance(raw_annotation, dict):
        raise SchemaViolation(f"[{index}].annotation", "expected a single annotation object")
    try:
        annotation = GoldAnnotation.model_validate(raw_annotation)
    except ValidationError as e:
        raise SchemaViolation(_annotation_path(index, e), e.errors()[0]["msg"]) from e

    if annotation.trajectory_id != trajectory.task_id:
        raise SchemaViolation(
            f"[{index}].annotation.trajectory_id",
            f"'{annotation.trajectory_id}' does not match trajectory '{trajectory.task_id}'",
        )
    if annotation.critical_step > trajectory.length:
        raise SchemaViolation(
            f"[{index}].annotation.critical_step",
            f"step {annotation.critical_step} exceeds trajectory length {trajectory.length}",
        )

    dataset = entry.get("dataset") or trajectory.env_name
    return BenchmarkItem(dataset=dataset, trajectory=trajectory, annotation=annotation)


def load_benchmark(path: Union[str, Path]) -> list[BenchmarkItem]:
    """
    Read a benchmark file: a JSON array of {dataset?, trajectory, annotation}.

    The whole file is validated before anything is returned.

    Raises:
        SchemaViolation: With the item index and field path of the first problem
    """
    path = Path(path)
    if not path.exists():
        raise SchemaViolation("$", f"benchmark file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except ValueError as e:
        raise SchemaViolation("$", f"not valid JSON: {e}") from e
    if not isinstance(data, list):
        raise SchemaViolation("$", "expected a JSON array of benchmark items")

    items = [_load_item(index, entry) for index, entry in enumerate(data)]
    logger.info("Loaded %d benchmark items from %s", len(items), path)
    return items


# ============================================================================
# Detection accuracy
# ============================================================================

def match_prediction(pred: CriticalDiagnosis, gold: GoldAnnotation) -> MatchLevel:
    """
    Deepest nested level the prediction reaches: step, then module, then error type.

    Raises:
        IdMismatch: If the prediction names a different trajectory
    """
    if pred.trajectory_id is not None and pred.trajectory_id != gold.trajectory_id:
        raise IdMismatch(f"Prediction for '{pred.trajectory_id}' paired with gold '{gold.trajectory_id}'")
    if pred.critical_step != gold.critical_step:
        return MatchLevel.NONE
    if pred.critical_module != gold.module:
        return MatchLevel.STEP
    if pred.error_label.error_type != gold.error_label.error_type:
        return MatchLevel.STEP_MODULE
    return MatchLevel.ALL


def error_type_matches(pred: CriticalDiagnosis, gold: GoldAnnotation) -> bool:
    """Error-type-only agreement, independent of step and module."""
    return pred.error_label.error_type == gold.error_label.error_type


def compute_detection_metrics(pairs: Sequence[tuple[CriticalDiagnosis, GoldAnnotation]]) -> DetectionMetrics:
    """
    Accuracy at each match level over prediction/gold pairs.

    Raises:
        EmptySet: If there are no pairs
        IdMismatch: If a pair refers to two different trajectories
    """
    if not pairs:
        raise EmptySet("No prediction/gold pairs to score")

    n = len(pairs)
    reached = {level: 0 for level in (MatchLevel.STEP, MatchLevel.STEP_MODULE, MatchLevel.ALL)}
    error_only = 0
    for pred, gold in pairs:
        level = match_prediction(pred, gold)
        for target in reached:
            if level.reaches(target):
                reached[target] += 1
        error_only += error_type_matches(pred, gold)

    return DetectionMetrics(
        step_acc=float(Fraction(reached[MatchLevel.STEP], n)),
        step_module_acc=float(Fraction(reached[MatchLevel.STEP_MODULE], n)),
        all_acc=float(Fraction(reached[MatchLevel.ALL], n)),
        error_only_acc=float(Fraction(error_only, n)),
        n=n,
    )


def _exact(value: float) -> Fraction:
    return Fraction(str(value))


def macro_average(per_dataset: Sequence[DetectionMetrics]) -> DetectionMetrics:
    """
    Unweighted mean of each accuracy across datasets; n is the total count.

    Raises:
        EmptySet: If no datasets are given
    """
    if not per_dataset:
        raise EmptySet("No datasets to average")
    count = len(per_dataset)
    means = {
        name: float(sum((_exact(getattr(m, name)) for m in per_dataset), Fraction(0)) / count)
        for name in ACCURACY_FIELDS
    }
    return DetectionMetrics(n=sum(m.n for m in per_dataset), **means)


def pooled_average(per_dataset: Sequence[DetectionMetrics]) -> DetectionMetrics:
    """
    Per-trajectory (micro) average: each dataset weighted by its n.

    Raises:
        EmptySet: If no datasets are given
    """
    if not per_dataset:
        raise EmptySet("No datasets to average")
    total = sum(m.n for m in per_dataset)
    means = {
        name: float(sum((_exact(getattr(m, name)) * m.n for m in per_dataset), Fraction(0)) / total)
        for name in ACCURACY_FIELDS
    }
    return DetectionMetrics(n=total, **means)


def metrics_by_dataset(
    items: Sequence[BenchmarkItem],
    predictions: Mapping[str, CriticalDiagnosis],
) -> dict[str, DetectionMetrics]:
    """
    Join predictions to gold items by trajectory id and score each dataset.

    Raises:
        IdMismatch: If a benchmark trajectory has no prediction
    """
    grouped: dict[str, list[tuple[CriticalDiagnosis, GoldAnnotation]]] = {}
    for item in items:
        trajectory_id = item.annotation.trajectory_id
        if trajectory_id not in predictions:
            raise IdMismatch(f"No prediction for benchmark trajectory '{trajectory_id}'")
        grouped.setdefault(item.dataset, []).append((predictions[trajectory_id], item.annotation))
    return {dataset: compute_detection_metrics(pairs) for dataset, pairs in sorted(grouped.items())}


def metrics_report(per_dataset: Mapping[str, DetectionMetrics], average: Averager = macro_average) -> dict:
    """JSON-ready report with every accuracy, error-only included."""
    return {
        "datasets": {name: metrics.model_dump() for name, metrics in per_dataset.items()},
        "average": average(list(per_dataset.values())).model_dump(),
        "averaging": "pooled" if average is pooled_average else "macro",
    }


def format_metrics_table(
    method_rows: Mapping[str, Mapping[str, DetectionMetrics]],
    average: Averager = macro_average,
) -> str:
    """
    Plain-text table: one row per method, S / S+M / ALL per dataset plus Average.

    Datasets appear in sorted order; percentages use one decimal, half-up.
    """
    datasets = sorted({name for per_dataset in method_rows.values() for name in per_dataset})
    header = ["Method"]
    for dataset in datasets + ["Average"]:
        header.extend(f"{dataset} {label}" for label, _ in TABLE_COLUMNS)

    rows = []
    for method, per_dataset in method_rows.items():
        row = [method]
        for dataset in datasets:
            metrics = per_dataset.get(dataset)
            row.extend(
                format_percent(getattr(metrics, field)) if metrics else "-" for _, field in TABLE_COLUMNS
            )
        mean = average(list(per_dataset.values()))
        row.extend(format_percent(getattr(mean, field)) for _, field in TABLE_COLUMNS)
        rows.append(row)
    return format_table(header, rows)


# ============================================================================
# Debugging outcomes
# ============================================================================

def success_rate_curve(results: Sequence[DebugResult], max_attempts: int) -> list[float]:
    """
    Fraction of tasks solved within k attempts, for k = 0..max_attempts.

    Point 0 is the initial rollout.

    Raises:
        EmptySet: If there are no results
    """
    if not results:
        raise EmptySet("No debug results to summarize")
    n = len(results)
    solved_at = [result.success_attempt() for result in results]
    curve = [
        float(Fraction(sum(1 for k_star in solved_at if k_star is not None and k_star <= k), n))
        for k in range(max_attempts + 1)
    ]
    assert all(a <= b for a, b in zip(curve, curve[1:])), "success curve must be non-decreasing"
    return curve


def attempts_histogram(results: Iterable[DebugResult]) -> dict[str, int]:
    """Count of tasks per solving attempt ('0' = initial, 'unsolved' otherwise)."""
    histogram: dict[str, int] = {}
    for result in results:
        k = result.success_attempt()
        key = "unsolved" if k is None else str(k)
        histogram[key] = histogram.get(key, 0) + 1
    return dict(sorted(histogram.items(), key=lambda kv: (kv[0] == "unsolved", kv[0].zfill(4))))


# ============================================================================
# Error propagation
# ============================================================================

def _severity_row(profile: ErrorProfile, diagnosis: Optional[CriticalDiagnosis], n_columns: int) -> tuple:
    length = profile.max_step
    critical = diagnosis.critical_step if diagnosis is not None else None
    row = []
    for column in range(1, n_columns + 1):
        if column > length:
            row.append(SeverityCode.CLEAN)
        elif critical is not None and column == critical:
            row.append(SeverityCode.FIRST_CRITICAL)
        elif critical is not None and column > critical:
            row.append(SeverityCode.POST_CRITICAL)
        elif profile.errors_at(column):
            row.append(SeverityCode.ERROR)
        else:
            row.append(SeverityCode.CLEAN)
    return tuple(row)


def propagation_matrix(
    profiles: Sequence[ErrorProfile],
    diagnoses: Sequence[CriticalDiagnosis],
) -> PropagationMatrix:
    """
    Severity grid with one row per trajectory, sorted by id.

    Cells after the first critical step stay marked as post-critical up to
    that trajectory's last step; columns past it are clean.

    Raises:
        EmptySet: If there are no profiles
        InconsistentIds: On duplicate ids or a diagnosis without a profile
    """
    if not profiles:
        raise EmptySet("No error profiles given")

    by_id: dict[str, ErrorProfile] = {}
    for profile in profiles:
        if profile.trajectory_id in by_id:
            raise InconsistentIds(f"Duplicate profile for '{profile.trajectory_id}'")
        by_id[profile.trajectory_id] = profile

    diagnosis_by_id: dict[str, CriticalDiagnosis] = {}
    for diagnosis in diagnoses:
        trajectory_id = diagnosis.trajectory_id
        if trajectory_id is None or trajectory_id not in by_id:
            raise InconsistentIds(f"Diagnosis for '{trajectory_id}' has no matching profile")
        if trajectory_id in diagnosis_by_id:
            raise InconsistentIds(f"Duplicate diagnosis for '{trajectory_id}'")
        diagnosis_by_id[trajectory_id] = diagnosis

    ids = sorted(by_id)
    n_columns = max(profile.max_step for profile in profiles)
    rows = tuple(_severity_row(by_id[i], diagnosis_by_id.get(i), n_columns) for i in ids)
    return PropagationMatrix(trajectory_ids=tuple(ids), n_columns=n_columns, rows=rows)
