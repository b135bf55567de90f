# circuitlab/schemas/config.py - Run configuration documents (one JSON file per run)
from pydantic import BaseModel, ConfigDict, Field, ValidationInfo, field_validator
from typing import Dict, List, Optional, Tuple

from circuitlab.core.config import settings


class ModelConfig(BaseModel):
    """Desk-scale decoder-only transformer"""
    n_layers: int = Field(2, ge=1)
    n_heads: int = Field(4, ge=1)
    d_model: int = Field(64, ge=1)
    d_head: Optional[int] = Field(None, ge=1, validate_default=True)  # derived as d_model // n_heads when omitted
    d_mlp: int = Field(256, ge=1)
    vocab_size: Optional[int] = Field(None, ge=2)  # filled from the tokenizer
    max_seq_len: int = Field(128, ge=1)
    seed: int = 0
    init_std: float = Field(0.02, gt=0)
    norm_eps: float = Field(1e-5, gt=0)
    linear: bool = False  # linear surrogate: no norm, fixed uniform attention, no GELU

    @field_validator("d_head")
    @classmethod
    def check_head_dims(cls, v, info: ValidationInfo):
        n_heads = info.data.get("n_heads")
        d_model = info.data.get("d_model")
        if n_heads is None or d_model is None:
            return v
        if v is None:
            if d_model % n_heads:
                raise ValueError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
            return d_model // n_heads
        if n_heads * v != d_model:
            raise ValueError(f"inconsistent dims: n_heads*d_head={n_heads * v} != d_model={d_model}")
        return v

    model_config = ConfigDict(extra="forbid")


class TrainConfig(BaseModel):
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(32, ge=1)
    steps: int = Field(5000, ge=0)  # 0 is accepted and leaves parameters untouched
    beta1: float = Field(0.9, gt=0, lt=1)
    beta2: float = Field(0.999, gt=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    grad_clip: Optional[float] = Field(1.0, gt=0)
    seed: int = 0
    task_mix: Dict[str, float] = Field(default_factory=lambda: {"validation": 0.8, "computation": 0.2})
    log_every: int = Field(100, ge=1)

    @field_validator("task_mix")
    @classmethod
    def check_task_mix(cls, v):
        unknown = set(v) - {"validation", "computation"}
        if unknown:
            raise ValueError(f"unknown tasks in task_mix: {sorted(unknown)}")
        if any(w < 0 for w in v.values()) or sum(v.values()) <= 0:
            raise ValueError("task_mix weights must be non-negative with a positive sum")
        return v

    model_config = ConfigDict(extra="forbid")


class DatasetConfig(BaseModel):
    operation: str = "add"
    templates: List[int] = Field(default_factory=lambda: list(range(1, 9)))
    n: int = Field(settings.DATASET_DEFAULT_N, ge=1)
    error_types: List[str] = Field(default_factory=lambda: ["result", "answer"])
    seed: int = 0
    holdout_fraction: float = Field(settings.EVAL_HOLDOUT_FRACTION, gt=0, lt=1)
    max_dividend: int = Field(settings.DIVISION_MAX_DIVIDEND, ge=10)

    @field_validator("templates")
    @classmethod
    def check_templates(cls, v):
        if not v or any(t < 1 or t > 8 for t in v):
            raise ValueError("template ids must be within 1..8")
        return v

    @field_validator("operation")
    @classmethod
    def check_operation(cls, v):
        if v not in ("add", "sub", "mul", "div"):
            raise ValueError("operation must be one of add, sub, mul, div")
        return v


class SearchConfig(BaseModel):
    k: int = Field(100, ge=1)
    n: int = Field(20, ge=1)
    band: Tuple[float, float] = (settings.FAITHFULNESS_BAND_LOW, settings.FAITHFULNESS_BAND_HIGH)
    eval_pairs: int = Field(100, ge=1)
    max_steps: Optional[int] = Field(None, ge=1)

    @field_validator("band")
    @classmethod
    def check_band(cls, v):
        if not v[0] < v[1]:
            raise ValueError(f"band lower bound must be below upper bound, got {v}")
        return v


class InterventionConfig(BaseModel):
    heads: Optional[List[str]] = None  # manual head list, e.g. ["L1H2", "L1H0"]
    top_heads: int = Field(2, ge=1)
    alpha: float = Field(settings.HEAD_PATCH_ALPHA, gt=0)
    reverse_alpha: float = Field(settings.REVERSE_HEAD_PATCH_ALPHA, gt=0)
    control_seed: int = 0
    bridge_src_layer: Optional[int] = None  # defaults to the final residual layer
    bridge_src_pos: str = "result-first"
    bridge_dst_layer: int = 0
    bridge_dst_pos: str = "result-second"
    bridge_scale: float = 1.0
    first_digit_min: float = settings.CONSISTENCY_FIRST_DIGIT_MIN
    match_gap_min: float = settings.CONSISTENCY_MATCH_GAP_MIN


class ProbeConfig(BaseModel):
    lr: float = Field(settings.PROBE_LR, gt=0)
    epochs: int = Field(settings.PROBE_EPOCHS, ge=1)
    batch_size: Optional[int] = Field(settings.PROBE_BATCH_SIZE, ge=1)
    positions: List[str] = Field(
        default_factory=lambda: ["equals", "result-first", "result-second", "answer-second"]
    )
    layers: Optional[List[int]] = None  # None = every residual layer
    train_per_template: int = Field(settings.PROBE_TRAIN_PER_TEMPLATE, ge=1)
    test_per_template: int = Field(settings.PROBE_TEST_PER_TEMPLATE, ge=1)


class PipelineConfig(BaseModel):
    """The single JSON document that configures a run; CLI flags override its values"""
    seed: int = settings.DEFAULT_SEED
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    search: SearchConfig = Field(default_factory=SearchConfig)
    intervention: InterventionConfig = Field(default_factory=InterventionConfig)
    probe: ProbeConfig = Field(default_factory=ProbeConfig)
