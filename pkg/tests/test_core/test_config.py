# tests/test_core/test_config.py - Settings and run configuration validation
import subprocess
import sys
from pathlib import Path

import pytest
from pydantic import ValidationError

from circuitlab.core.config import Settings
from circuitlab.schemas.config import (
    InterventionConfig,
    ModelConfig,
    PipelineConfig,
    SearchConfig,
    TrainConfig,
)


def test_settings_read_prefixed_environment(monkeypatch):
    monkeypatch.setenv("CIRCUITLAB_PROBE_LR", "0.05")
    monkeypatch.setenv("CIRCUITLAB_SIGNATURE_MIN_GAP", "30")
    fresh = Settings()
    assert fresh.PROBE_LR == pytest.approx(0.05)
    assert fresh.SIGNATURE_MIN_GAP == pytest.approx(30.0)


def test_settings_defaults():
    fresh = Settings(_env_file=None)
    assert fresh.FAITHFULNESS_BAND_LOW == 99.0
    assert fresh.FAITHFULNESS_BAND_HIGH == 101.0
    assert fresh.BRIDGE_SINGLE_ERROR_TOLERANCE == 10.0


def test_head_dimension_is_derived():
    config = ModelConfig(n_heads=4, d_model=32)
    assert config.d_head == 8


def test_inconsistent_dims_are_rejected():
    with pytest.raises(ValidationError):
        ModelConfig(n_heads=3, d_model=8)
    with pytest.raises(ValidationError):
        ModelConfig(n_heads=2, d_model=8, d_head=3)


def test_unknown_model_fields_are_rejected():
    with pytest.raises(ValidationError):
        ModelConfig(n_layer=2)


def test_zero_training_steps_are_accepted():
    assert TrainConfig(steps=0).steps == 0


def test_task_mix_validation():
    with pytest.raises(ValidationError):
        TrainConfig(task_mix={"translation": 1.0})
    with pytest.raises(ValidationError):
        TrainConfig(task_mix={"validation": 0.0, "computation": 0.0})


def test_band_must_be_ordered():
    with pytest.raises(ValidationError):
        SearchConfig(band=(101.0, 99.0))


def test_head_patch_alpha_must_be_positive():
    with pytest.raises(ValidationError):
        InterventionConfig(alpha=0.0)


def test_pipeline_config_round_trips_through_json():
    config = PipelineConfig(seed=3, model=ModelConfig(n_layers=1, n_heads=2, d_model=8))
    again = PipelineConfig.model_validate_json(config.model_dump_json())
    assert again == config
    assert again.model.d_head == 4


def test_schemas_import_without_deprecated_pydantic_api():
    modules = ", ".join(
        f"circuitlab.{name}" for name in (
            "core.config", "schemas.config", "schemas.dataset", "schemas.circuit",
            "schemas.intervention", "schemas.report",
        )
    )
    completed = subprocess.run(
        [sys.executable, "-W", "error::pydantic.warnings.PydanticDeprecatedSince20", "-c", f"import {modules}"],
        cwd=Path(__file__).parents[2],
        capture_output=True,
        text=True,
    )
    assert completed.returncode == 0, completed.stderr
