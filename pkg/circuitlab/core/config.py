# circuitlab/core/config.py - Environment-level settings for the analysis pipeline

from pydantic_settings import BaseSettings, SettingsConfigDict
from typing import Optional


class Settings(BaseSettings):
    # Where every command writes its artifacts and manifests
    ARTIFACT_DIR: str = "runs"
    LOG_LEVEL: str = "INFO"
    DEFAULT_SEED: int = 0
    N_WORKERS: int = 4

    # Dataset
    DATASET_DEFAULT_N: int = 1000
    EVAL_HOLDOUT_FRACTION: float = 0.5  # share of filtered pairs kept for faithfulness
    DIVISION_MAX_DIVIDEND: int = 99
    COMPUTATION_RESAMPLE_BUDGET: int = 100

    # Patching engine
    EAP_ABS_PER_PAIR: bool = True  # abs() per pair, then mean; False = mean, then abs()
    FAITHFULNESS_DEGENERATE_EPS: float = 1e-9
    FAITHFULNESS_BAND_LOW: float = 99.0
    FAITHFULNESS_BAND_HIGH: float = 101.0

    # Probes
    PROBE_LR: float = 0.001
    PROBE_EPOCHS: int = 1
    PROBE_BATCH_SIZE: Optional[int] = None  # None = full batch
    PROBE_TRAIN_PER_TEMPLATE: int = 500
    PROBE_TEST_PER_TEMPLATE: int = 100

    # Consistency heads / interventions
    CONSISTENCY_FIRST_DIGIT_MIN: float = 0.2
    CONSISTENCY_MATCH_GAP_MIN: float = 0.1
    HEAD_PATCH_ALPHA: float = 3.1
    REVERSE_HEAD_PATCH_ALPHA: float = 1.0
    BRIDGE_SINGLE_ERROR_TOLERANCE: float = 10.0  # points

    # Validation-gap signature
    SIGNATURE_MIN_GAP: float = 20.0  # points between single-error and consistent-error accuracy

    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="CIRCUITLAB_",
        case_sensitive=False,
        extra="ignore",
    )


settings = Settings()
