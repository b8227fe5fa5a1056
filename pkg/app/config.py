"""Application configuration using Pydantic Settings"""

import logging
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, Field, PositiveInt, ValidationError, ValidationInfo, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.exceptions import InvalidConfigError
from app.models.schemas import StrategyId

# Configure logging
logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    """Defaults loaded from environment variables and .env"""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # Application Settings
    app_name: str = "Trajectory Debugger"
    app_version: str = "1.0.0"
    log_level: str = "INFO"

    # Live model endpoint (OpenAI-compatible)
    llm_base_url: str = "https://api.openai.com/v1"
    llm_api_key: str = ""
    llm_model_id: str = "gpt-4o-mini"
    llm_timeout: float = 60.0
    llm_max_retries: int = 3
    llm_backoff_seconds: float = 1.0
    ssl_verify: bool = True

    # Roles
    judge_model_id: str = ""  # empty = same as llm_model_id
    agent_temperature: float = 0.0
    judge_temperature: float = 0.0
    json_retry_limit: int = 2

    # Rollout / debugging defaults
    history_window: int = 10
    history_obs_char_limit: int = 300
    step_cap: int = 30
    debug_budget: int = 5
    output_dir: str = "./runs"

    # Sentry Configuration
    sentry_enabled: bool = False
    sentry_dsn: str = ""
    app_env: str = "development"

    @property
    def effective_judge_model(self) -> str:
        return self.judge_model_id or self.llm_model_id


class RunConfig(BaseModel):
    """Resolved configuration of one CLI run"""

    backend: Literal["live", "scripted"] = "scripted"
    script_path: Optional[Path] = None
    judge_script_path: Optional[Path] = None
    model_id: str = "scripted"
    judge_model_id: Optional[str] = None
    temperature: float = Field(0.0, ge=0.0)
    env_name: str = "gridworld"
    world_paths: list[Path] = Field(default_factory=list)
    benchmark_path: Optional[Path] = None
    strategy: StrategyId = StrategyId.MODULAR
    step_cap: PositiveInt = 30
    history_window: PositiveInt = 10
    obs_char_limit: PositiveInt = 300
    full_history_last_step: bool = False
    budget: int = 5
    token_budget: Optional[int] = None
    output_dir: Path = Path("./runs")
    seed: int = 0
    jobs: PositiveInt = 1

    @model_validator(mode="after")
    def _check_consistency(self, info: ValidationInfo) -> "RunConfig":
        offline = bool(info.context and info.context.get("offline"))
        scripts = (self.script_path, self.judge_script_path)
        if self.backend == "scripted" and not offline and all(s is None for s in scripts):
            raise ValueError("scripted backend requires script_path")
        if self.budget < 1:
            raise ValueError("budget must be at least 1")
        if self.token_budget is not None and self.token_budget < 1:
            raise ValueError("token_budget must be positive")
        return self

    @property
    def effective_judge_model(self) -> str:
        return self.judge_model_id or self.model_id


def _defaults_from_settings(source: Settings) -> dict[str, Any]:
    return {
        "model_id": source.llm_model_id,
        "judge_model_id": source.judge_model_id or None,
        "temperature": source.agent_temperature,
        "step_cap": source.step_cap,
        "history_window": source.history_window,
        "obs_char_limit": source.history_obs_char_limit,
        "budget": source.debug_budget,
        "output_dir": source.output_dir,
    }


def _read_config_file(config_file: Path) -> dict[str, Any]:
    if not config_file.exists():
        raise InvalidConfigError(f"Config file not found: {config_file}")
    try:
        with open(config_file, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise InvalidConfigError(f"Config file {config_file} is not valid YAML: {e}") from e
    if not isinstance(data, dict):
        raise InvalidConfigError(f"Config file {config_file} must hold a mapping")
    return data


def load_run_config(
    config_file: Optional[Path] = None,
    overrides: Optional[dict[str, Any]] = None,
    source: Optional[Settings] = None,
    offline: bool = False,
) -> RunConfig:
    """
    Resolve a RunConfig with precedence flags > config file > environment > defaults.

    Args:
        config_file: Optional YAML file with RunConfig keys
        overrides: Command-line values; None entries are ignored
        source: Settings to take environment defaults from
        offline: Skip backend checks for commands that never call a model

    Returns:
        Validated RunConfig

    Raises:
        InvalidConfigError: If the file is unreadable or the merged values are invalid
    """
    merged = _defaults_from_settings(source or settings)
    if config_file is not None:
        file_values = _read_config_file(Path(config_file))
        logger.info("Loaded run configuration from %s", config_file)
        merged.update(file_values)
    for key, value in (overrides or {}).items():
        if value is None or value == ():
            continue
        merged[key] = value

    try:
        return RunConfig.model_validate(merged, context={"offline": offline})
    except ValidationError as e:
        first = e.errors()[0]
        location = ".".join(str(part) for part in first["loc"]) or "config"
        raise InvalidConfigError(f"{location}: {first['msg']}") from e


# Global settings instance
settings = Settings()
