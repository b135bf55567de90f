# circuitlab/schemas/intervention.py
from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, ValidationInfo, field_validator


class InterventionKind(str, Enum):
    HEAD_PATTERN = "head-pattern"
    RESIDUAL_BRIDGE = "residual-bridge"


class SourceSelector(str, Enum):
    SINGLE_ERROR = "single-error"
    CONSISTENT_ERROR = "consistent-error"
    SELF = "self"


class InterventionSpec(BaseModel):
    kind: InterventionKind
    heads: List[Tuple[int, int]] = Field(default_factory=list)
    alpha: float = 1.0
    source: SourceSelector = SourceSelector.SELF
    src_layer: Optional[int] = None
    src_pos: Optional[str] = None
    dst_layer: Optional[int] = None
    dst_pos: Optional[str] = Field(None, validate_default=True)
    scale: float = 1.0

    @field_validator("alpha")
    @classmethod
    def check_alpha(cls, v, info: ValidationInfo):
        if info.data.get("kind") == InterventionKind.HEAD_PATTERN and v <= 0:
            raise ValueError(f"head-pattern interventions need alpha > 0, got {v}")
        return v

    @field_validator("dst_pos")
    @classmethod
    def check_bridge_fields(cls, v, info: ValidationInfo):
        if info.data.get("kind") == InterventionKind.RESIDUAL_BRIDGE:
            missing = [
                name for name in ("src_layer", "src_pos", "dst_layer")
                if info.data.get(name) is None
            ]
            if v is None:
                missing.append("dst_pos")
            if missing:
                raise ValueError(f"residual bridge needs {', '.join(missing)}")
        return v

    def describe(self) -> str:
        if self.kind == InterventionKind.HEAD_PATTERN:
            heads = ",".join(f"L{l}H{h}" for l, h in self.heads) or "-"
            return f"heads[{heads}] := {self.alpha:g} x {self.source.value}"
        return (
            f"resid[{self.dst_layer}@{self.dst_pos}] += "
            f"{self.scale:g} x resid[{self.src_layer}@{self.src_pos}]"
        )


class AccuracyDelta(BaseModel):
    """Pair accuracy and invalid-prediction rate, before and after an intervention"""
    accuracy_before: float
    accuracy_after: float
    invalid_rate_before: float
    invalid_rate_after: float
    n_pairs: int

    @property
    def accuracy_delta(self) -> float:
        return self.accuracy_after - self.accuracy_before

    @property
    def invalid_rate_delta(self) -> float:
        return self.invalid_rate_after - self.invalid_rate_before


class HeadPatchReport(BaseModel):
    spec: InterventionSpec
    direction: str  # forward | reverse
    target_condition: str
    source_condition: str
    result: AccuracyDelta
    control_heads: List[Tuple[int, int]] = Field(default_factory=list)
    control: Optional[AccuracyDelta] = None


class BridgeReport(BaseModel):
    spec: InterventionSpec
    consistent: AccuracyDelta
    single: Dict[str, AccuracyDelta] = Field(default_factory=dict)  # error type -> delta


class HeadScore(BaseModel):
    layer: int
    head: int
    score: float
    first_digit: Dict[str, float]   # condition -> answer-first -> result-first attention
    second_digit: Dict[str, float]  # condition -> answer-second -> result-second attention
    consistency: bool = False
    inverse: bool = False  # negative score: attends more under mismatch

    @property
    def name(self) -> str:
        return f"L{self.layer}H{self.head}"
