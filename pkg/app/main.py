"""Command-line entry point for rollouts, debugging runs and evaluation"""

import asyncio
import functools
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import click
import sentry_sdk
from pydantic import BaseModel, TypeAdapter, ValidationError

from app.config import RunConfig, load_run_config, settings
from app.exceptions import (
    DebuggerError,
    EvaluationError,
    InvalidConfigError,
    InvalidWorldSpec,
    TaxonomyError,
    TrajectoryError,
)
from app.models.schemas import (
    CriticalDiagnosis,
    DebugResult,
    ErrorProfile,
    HaltReason,
    OutcomeStatus,
    RolloutConfig,
    Trajectory,
)
from app.services.analyzer_service import analyze_critical, direct_prompt_localize
from app.services.baselines_service import best_of_n, self_refine_loop, tot_search
from app.services.debug_service import debug_loop
from app.services.detector_service import detect_all
from app.services.environment import EnvFactory
from app.services.evaluation_service import (
    attempts_histogram,
    format_metrics_table,
    load_benchmark,
    macro_average,
    metrics_by_dataset,
    metrics_report,
    pooled_average,
    propagation_matrix,
)
from app.services.gridworld_env import ENV_NAME as GRIDWORLD, load_world_spec
from app.services.llm_client import ModelClient, create_client
from app.services.localization_service import Corrector, binary_search_localize, brute_force_localize
from app.services.prompt_library import template_set_for
from app.services.replay_env import ENV_NAME as REPLAY, ReplayEnv, env_factory_for, load_recording
from app.services.rollout_service import run_many
from app.services.taxonomy import catalog_document
from app.services.trajectory_service import serialize
from app.utils.formatting import format_table
from app.utils.sentry_utils import capture_exception_with_context

# Configure logging
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_RUNTIME = 2

# Errors caused by what the operator passed in, not by a failing run
INPUT_ERRORS = (InvalidConfigError, TrajectoryError, InvalidWorldSpec, EvaluationError, TaxonomyError)

DEBUG_METHODS = ("debug", "self-refine", "best-of-n", "tot", "brute", "binary")


def init_sentry() -> None:
    """Initialize Sentry for error tracking (only if enabled)."""
    if settings.sentry_enabled and settings.sentry_dsn:
        sentry_sdk.init(
            dsn=settings.sentry_dsn,
            traces_sample_rate=1.0,
            environment=settings.app_env,
            release=f"trajectory-debugger@{settings.app_version}",
        )


def report_error(error: Exception) -> int:
    """Print 'ERROR <code>: message' to stderr and return the exit code."""
    code = type(error).__name__
    click.echo(f"ERROR {code}: {error}", err=True)
    if isinstance(error, INPUT_ERRORS):
        return EXIT_INPUT
    return EXIT_RUNTIME


def guarded(func: Callable[..., int]) -> Callable[..., int]:
    """Map package errors of a command to exit codes."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs) -> int:
        try:
            return func(*args, **kwargs)
        except DebuggerError as e:
            if not isinstance(e, INPUT_ERRORS):
                capture_exception_with_context(e, stage=func.__name__)
            return report_error(e)
        except Exception as e:
            logger.exception("Unexpected failure in %s", func.__name__)
            capture_exception_with_context(e, stage=func.__name__)
            return report_error(e)

    return wrapper


class ExitCodeGroup(click.Group):
    """Click group whose commands return exit codes; usage errors exit 1."""

    def main(self, *args, **kwargs):
        kwargs["standalone_mode"] = False
        try:
            code = super().main(*args, **kwargs)
        except click.ClickException as e:
            e.show()
            sys.exit(EXIT_INPUT)
        except click.Abort:
            click.echo("Aborted!", err=True)
            sys.exit(EXIT_INPUT)
        sys.exit(code if isinstance(code, int) else EXIT_OK)


# ============================================================================
# Shared helpers
# ============================================================================

def run_options(func: Callable) -> Callable:
    """Options shared by every command that talks to a model or environment."""
    options = [
        click.option("--config", "config_file", type=click.Path(path_type=Path), help="YAML run configuration"),
        click.option("--backend", type=click.Choice(["live", "scripted"]), help="Model backend"),
        click.option("--script", "script_path", type=click.Path(path_type=Path), help="Agent script file"),
        click.option("--judge-script", "judge_script_path", type=click.Path(path_type=Path), help="Judge script file"),
        click.option("--model", "model_id", help="Agent model id"),
        click.option("--judge-model", "judge_model_id", help="Judge model id"),
        click.option("--env", "env_name", type=click.Choice([GRIDWORLD, REPLAY]), help="Environment"),
        click.option("--world", "world_paths", multiple=True, type=click.Path(path_type=Path),
                     help="World spec file (gridworld); repeatable"),
        click.option("--strategy", type=click.Choice(["modular", "react", "reflection", "act_only", "memory_react"])),
        click.option("--step-cap", type=int),
        click.option("--history-window", type=int),
        click.option("--budget", type=int, help="Re-rollout attempts"),
        click.option("--token-budget", type=int, help="Token cap for comparison methods"),
        click.option("--output-dir", type=click.Path(path_type=Path)),
        click.option("--seed", type=int),
        click.option("--jobs", type=int, help="Concurrent tasks"),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def resolve_config(config_file: Optional[Path], offline: bool = False, **flags: Any) -> RunConfig:
    flags = {key: (list(value) if isinstance(value, tuple) and value else value) for key, value in flags.items()}
    return load_run_config(config_file, flags, offline=offline)


def rollout_config(config: RunConfig) -> RolloutConfig:
    return RolloutConfig(
        strategy=config.strategy,
        history_window=config.history_window,
        step_cap=config.step_cap,
        model_id=config.model_id,
        temperature=config.temperature,
        template_set=template_set_for(config.env_name),
        obs_char_limit=config.obs_char_limit,
        full_history_last_step=config.full_history_last_step,
    )


def agent_client_for(config: RunConfig) -> ModelClient:
    return create_client(config.backend, config.script_path)


def judge_client_for(config: RunConfig, agent: Optional[ModelClient] = None) -> ModelClient:
    if config.backend == "scripted" and config.judge_script_path is not None:
        return create_client(config.backend, config.judge_script_path)
    if config.backend == "live":
        return create_client(config.backend)
    if agent is not None:
        return agent
    return create_client(config.backend, config.script_path)


def read_trajectories(paths: Sequence[Path]) -> list[Trajectory]:
    if not paths:
        raise InvalidConfigError("No trajectory files given")
    return [load_recording(path) for path in paths]


def factory_for(trajectory: Trajectory, config: RunConfig) -> EnvFactory:
    """Environment factory for the task a trajectory was recorded on."""
    if trajectory.env_name == REPLAY:
        return lambda: ReplayEnv(trajectory)
    step_cap = trajectory.step_cap or config.step_cap
    for path in config.world_paths:
        if load_world_spec(path).task_id == trajectory.task_id:
            return env_factory_for(GRIDWORLD, path, step_cap)
    raise InvalidConfigError(f"No world file for task '{trajectory.task_id}'; pass it with --world")


def write_output(config: RunConfig, name: str, content: str) -> Path:
    config.output_dir.mkdir(parents=True, exist_ok=True)
    path = config.output_dir / name
    path.write_text(content, encoding="utf-8")
    return path


def dump_model(model: BaseModel) -> str:
    return model.model_dump_json(indent=2) + "\n"


def read_models(paths: Sequence[Path], adapter: TypeAdapter) -> list:
    """Read JSON files holding one object or an array of objects."""
    items = []
    for path in paths:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as e:
            raise InvalidConfigError(f"Cannot read {path}: {e}") from e
        try:
            items.extend(adapter.validate_python(data if isinstance(data, list) else [data]))
        except ValidationError as e:
            raise InvalidConfigError(f"{path} is not valid: {e.errors()[0]['msg']}") from e
    return items


# ============================================================================
# Commands
# ============================================================================

@click.group(cls=ExitCodeGroup)
@click.option("--log-level", default=None, help="Logging level (default from settings)")
def cli(log_level: Optional[str]) -> None:
    """Trajectory debugger: roll out agents, localize critical errors and re-roll."""
    logging.basicConfig(
        level=(log_level or settings.log_level).upper(),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        stream=sys.stderr,
    )
    init_sentry()


@cli.command()
@run_options
@guarded
def rollout(config_file, **flags) -> int:
    """Run the agent once on every --world task and write trajectory JSON."""
    config = resolve_config(config_file, **flags)
    if not config.world_paths:
        raise InvalidConfigError("No tasks given; pass --world or world_paths in the config")

    factories = [env_factory_for(config.env_name, path, config.step_cap) for path in config.world_paths]
    client = agent_client_for(config)
    trajectories = asyncio.run(run_many(rollout_config(config), factories, client, jobs=config.jobs))

    rows = []
    crashed = False
    for trajectory in trajectories:
        write_output(config, f"{trajectory.task_id}.json", serialize(trajectory))
        rows.append([trajectory.task_id, str(trajectory.outcome), str(trajectory.length)])
        outcome = trajectory.outcome
        if outcome.status == OutcomeStatus.SYSTEM_HALT and outcome.reason == HaltReason.ENVIRONMENT_ERROR:
            crashed = True
    click.echo(format_table(["task", "outcome", "steps"], rows), nl=False)
    return EXIT_RUNTIME if crashed else EXIT_OK


async def _debug_one(
    method: str,
    analyzer: str,
    trajectory: Trajectory,
    config: RunConfig,
    agent: ModelClient,
    judge: ModelClient,
    k: int,
    beam: int,
) -> BaseModel:
    factory = factory_for(trajectory, config)
    rollout_settings = rollout_config(config).model_copy(
        update={"strategy": trajectory.strategy, "step_cap": trajectory.step_cap or config.step_cap}
    )
    if method == "debug":
        return await debug_loop(trajectory, factory, judge, agent, config.budget, analyzer, rollout_settings)
    if method == "self-refine":
        return await self_refine_loop(
            factory, agent, config.budget, rollout_settings, initial=trajectory, token_budget=config.token_budget
        )
    if method == "best-of-n":
        return await best_of_n(
            factory, agent, config.budget, rollout_settings, seed=config.seed, token_budget=config.token_budget
        )
    if method == "tot":
        return await tot_search(factory, agent, k, beam, rollout_settings, token_budget=config.token_budget)
    corrector = Corrector(judge, config.effective_judge_model)
    localize = brute_force_localize if method == "brute" else binary_search_localize
    return await localize(trajectory, factory, corrector, agent, rollout_settings)


@cli.command()
@click.argument("trajectories", nargs=-1, type=click.Path(path_type=Path))
@click.option("--method", type=click.Choice(DEBUG_METHODS), default="debug", show_default=True)
@click.option("--analyzer", type=click.Choice(["profile", "direct"]), default="profile", show_default=True)
@click.option("--k", "k", type=int, default=3, show_default=True, help="Tree search proposals per state")
@click.option("--beam", type=int, default=1, show_default=True, help="Tree search beam width")
@run_options
@guarded
def debug(trajectories, method, analyzer, k, beam, config_file, **flags) -> int:
    """Debug recorded trajectories and write one result file per task."""
    config = resolve_config(config_file, **flags)
    loaded = read_trajectories(trajectories)
    agent = agent_client_for(config)
    judge = judge_client_for(config, agent)

    results = []
    for trajectory in loaded:
        result = asyncio.run(_debug_one(method, analyzer, trajectory, config, agent, judge, k, beam))
        if isinstance(result, DebugResult):
            write_output(config, f"{trajectory.task_id}.debug.json", dump_model(result))
            results.append(result)
        else:
            write_output(config, f"{trajectory.task_id}.localization.json", dump_model(result))
            click.echo(f"{trajectory.task_id}: critical step {result.critical_step} ({result.probe_count} probes)")

    if results:
        rows = [
            [
                r.task_id,
                r.method,
                str(r.initial.outcome),
                str(r.final_outcome),
                str(len(r.attempts)),
                str(r.total_usage.total),
            ]
            for r in results
        ]
        click.echo(format_table(["task", "method", "initial", "final", "attempts", "tokens"], rows), nl=False)
        initial_ok = sum(r.initial.is_success for r in results)
        final_ok = sum(r.final_outcome.is_success for r in results)
        click.echo(f"Initial successes: {initial_ok}/{len(results)}")
        click.echo(f"Final successes: {final_ok}/{len(results)}")
        histogram = ", ".join(f"{key}: {count}" for key, count in attempts_histogram(results).items())
        click.echo(f"Solved at attempt: {histogram}")
        click.echo(f"Total tokens: {sum(r.total_usage.total for r in results)}")
    return EXIT_OK


@cli.command()
@click.argument("trajectories", nargs=-1, type=click.Path(path_type=Path))
@run_options
@guarded
def detect(trajectories, config_file, **flags) -> int:
    """Run per-step, per-module error detection and write error profiles."""
    config = resolve_config(config_file, **flags)
    judge = judge_client_for(config)
    for trajectory in read_trajectories(trajectories):
        profile = asyncio.run(detect_all(trajectory, judge, config.effective_judge_model))
        write_output(config, f"{trajectory.task_id}.profile.json", dump_model(profile))
        errors = sum(d.error_detected for d in profile.detections)
        click.echo(f"{trajectory.task_id}: {len(profile.detections)} detections, {errors} errors")
    return EXIT_OK


async def _analyze_one(trajectory: Trajectory, analyzer: str, judge: ModelClient, model_id: str) -> CriticalDiagnosis:
    if analyzer == "direct":
        return await direct_prompt_localize(trajectory, judge, model_id)
    profile = await detect_all(trajectory, judge, model_id)
    return await analyze_critical(trajectory, profile, 1, (), judge, model_id)


@cli.command()
@click.argument("trajectories", nargs=-1, type=click.Path(path_type=Path))
@click.option("--analyzer", type=click.Choice(["profile", "direct"]), default="profile", show_default=True)
@run_options
@guarded
def analyze(trajectories, analyzer, config_file, **flags) -> int:
    """Localize the critical error of failed trajectories."""
    config = resolve_config(config_file, **flags)
    judge = judge_client_for(config)
    for trajectory in read_trajectories(trajectories):
        if trajectory.is_success:
            logger.warning("Skipping %s: the trajectory succeeded", trajectory.task_id)
            continue
        diagnosis = asyncio.run(_analyze_one(trajectory, analyzer, judge, config.effective_judge_model))
        write_output(config, f"{trajectory.task_id}.diagnosis.json", dump_model(diagnosis))
        click.echo(f"{trajectory.task_id}: step {diagnosis.critical_step} {diagnosis.error_label}")
    return EXIT_OK


@cli.command("eval-detection")
@click.argument("predictions", nargs=-1, type=click.Path(path_type=Path))
@click.option("--benchmark", "benchmark_path", type=click.Path(path_type=Path), help="Benchmark JSON file")
@click.option("--method-name", default="predictions", show_default=True, help="Row label in the table")
@click.option("--micro", is_flag=True, help="Pool trajectories instead of averaging datasets")
@click.option("--config", "config_file", type=click.Path(path_type=Path))
@click.option("--output-dir", type=click.Path(path_type=Path))
@guarded
def eval_detection(predictions, benchmark_path, method_name, micro, config_file, output_dir) -> int:
    """Score diagnosis files against a gold benchmark."""
    config = resolve_config(config_file, offline=True, benchmark_path=benchmark_path, output_dir=output_dir)
    if config.benchmark_path is None:
        raise InvalidConfigError("No benchmark given; pass --benchmark")
    if not predictions:
        raise InvalidConfigError("No prediction files given")

    items = load_benchmark(config.benchmark_path)
    diagnoses = read_models(predictions, TypeAdapter(list[CriticalDiagnosis]))
    by_id = {d.trajectory_id: d for d in diagnoses if d.trajectory_id is not None}

    average = pooled_average if micro else macro_average
    per_dataset = metrics_by_dataset(items, by_id)
    write_output(config, "metrics.json", json.dumps(metrics_report(per_dataset, average), indent=2) + "\n")
    click.echo(format_metrics_table({method_name: per_dataset}, average), nl=False)
    return EXIT_OK


@cli.command()
@click.argument("profiles", nargs=-1, type=click.Path(path_type=Path))
@click.option("--diagnosis", "diagnosis_paths", multiple=True, type=click.Path(path_type=Path))
@click.option("--config", "config_file", type=click.Path(path_type=Path))
@click.option("--output-dir", type=click.Path(path_type=Path))
@guarded
def propagation(profiles, diagnosis_paths, config_file, output_dir) -> int:
    """Write the per-step error severity matrix as CSV."""
    config = resolve_config(config_file, offline=True, output_dir=output_dir)
    loaded = read_models(profiles, TypeAdapter(list[ErrorProfile]))
    diagnoses = read_models(diagnosis_paths, TypeAdapter(list[CriticalDiagnosis]))
    matrix = propagation_matrix(loaded, diagnoses)
    path = write_output(config, "propagation.csv", matrix.to_csv())
    click.echo(f"{len(matrix.rows)} rows x {matrix.n_columns} columns -> {path}")
    return EXIT_OK


@cli.command("bench-validate")
@click.argument("benchmark_path", type=click.Path(path_type=Path))
@guarded
def bench_validate(benchmark_path) -> int:
    """Check a benchmark file and print item counts per dataset."""
    items = load_benchmark(benchmark_path)
    counts: dict[str, int] = {}
    for item in items:
        counts[item.dataset] = counts.get(item.dataset, 0) + 1
    click.echo(format_table(["dataset", "items"], [[name, str(n)] for name, n in sorted(counts.items())]), nl=False)
    click.echo(f"{len(items)} items OK")
    return EXIT_OK


@cli.command("taxonomy-export")
@click.option("--config", "config_file", type=click.Path(path_type=Path))
@click.option("--output-dir", type=click.Path(path_type=Path))
@guarded
def taxonomy_export(config_file, output_dir) -> int:
    """Write the versioned error-type catalog as JSON."""
    config = resolve_config(config_file, offline=True, output_dir=output_dir)
    path = write_output(config, "taxonomy.json", json.dumps(catalog_document(), indent=2) + "\n")
    click.echo(str(path))
    return EXIT_OK


if __name__ == "__main__":
    cli()
