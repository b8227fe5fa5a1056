import pytest

from app.config import RunConfig, Settings, load_run_config
from app.exceptions import InvalidConfigError
from app.models.schemas import StrategyId


def _settings(**overrides) -> Settings:
    return Settings(_env_file=None, **overrides)


def test_settings_feed_run_defaults():
    source = _settings(llm_model_id="gpt-test", debug_budget=7, history_window=4)
    config = load_run_config(overrides={"script_path": "agent.yaml"}, source=source)

    assert config.model_id == "gpt-test"
    assert config.budget == 7
    assert config.history_window == 4
    assert config.effective_judge_model == "gpt-test"


def test_precedence_flags_over_file_over_settings(tmp_path):
    config_file = tmp_path / "run.yaml"
    config_file.write_text(
        "backend: scripted\nscript_path: agent.yaml\nstep_cap: 12\nstrategy: react\nbudget: 2\n",
        encoding="utf-8",
    )
    source = _settings(step_cap=30, debug_budget=5)

    config = load_run_config(config_file, {"budget": 4, "seed": None}, source=source)

    assert config.step_cap == 12
    assert config.strategy == StrategyId.REACT
    assert config.budget == 4
    assert config.seed == 0


def test_scripted_backend_needs_a_script():
    with pytest.raises(InvalidConfigError) as exc:
        load_run_config(overrides={"backend": "scripted"}, source=_settings())
    assert "script_path" in str(exc.value)


def test_judge_script_alone_is_enough():
    config = load_run_config(overrides={"judge_script_path": "judge.yaml"}, source=_settings())
    assert config.script_path is None


def test_offline_commands_skip_backend_check():
    config = load_run_config(source=_settings(), offline=True)
    assert isinstance(config, RunConfig)


def test_invalid_values_name_the_field():
    with pytest.raises(InvalidConfigError) as exc:
        load_run_config(overrides={"script_path": "a.yaml", "step_cap": 0}, source=_settings())
    assert str(exc.value).startswith("step_cap:")


def test_budget_must_be_positive():
    with pytest.raises(InvalidConfigError):
        load_run_config(overrides={"script_path": "a.yaml", "budget": 0}, source=_settings())


def test_missing_config_file(tmp_path):
    with pytest.raises(InvalidConfigError):
        load_run_config(tmp_path / "absent.yaml", source=_settings())


def test_config_file_must_be_mapping(tmp_path):
    config_file = tmp_path / "run.yaml"
    config_file.write_text("- just\n- a list\n", encoding="utf-8")
    with pytest.raises(InvalidConfigError):
        load_run_config(config_file, source=_settings())


def test_empty_tuple_override_is_ignored():
    config = load_run_config(
        overrides={"script_path": "a.yaml", "world_paths": ()}, source=_settings()
    )
    assert config.world_paths == []


def test_judge_model_falls_back_to_agent_model():
    config = load_run_config(overrides={"script_path": "a.yaml", "model_id": "m1"}, source=_settings())
    assert config.effective_judge_model == "m1"
    config = load_run_config(
        overrides={"script_path": "a.yaml", "model_id": "m1", "judge_model_id": "j1"}, source=_settings()
    )
    assert config.effective_judge_model == "j1"
