# circuitlab/schemas/report.py
from datetime import datetime
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field


class RunManifest(BaseModel):
    """Traces every artifact of one CLI invocation back to its inputs"""
    command: str
    argv: List[str] = Field(default_factory=list)
    config_hash: str
    seed: int
    checkpoint_id: Optional[str] = None
    dataset_ids: List[str] = Field(default_factory=list)
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: Dict[str, str] = Field(default_factory=dict)
    config: Dict[str, Any] = Field(default_factory=dict)
    status: Dict[str, Any] = Field(default_factory=dict)
    created_at: str = Field(default_factory=lambda: datetime.now().isoformat())


class AccuracyRow(BaseModel):
    """Detection accuracy of one template (percent)"""
    template_id: int
    error_type: str
    mean: float
    n_pairs: int


class AccuracySummary(BaseModel):
    error_type: str
    mean: float
    std: float
    per_template: List[AccuracyRow] = Field(default_factory=list)


class SignatureCheck(BaseModel):
    name: str
    description: str
    passed: bool
    value: Optional[float] = None
    threshold: Optional[float] = None
    gating: bool = False

    @property
    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"


class Signature(BaseModel):
    checks: List[SignatureCheck] = Field(default_factory=list)

    @property
    def gate_passed(self) -> bool:
        return all(c.passed for c in self.checks if c.gating)


class ProbeCell(BaseModel):
    layer: int
    position: str
    train_accuracy: float
    test_accuracy: float
    n_classes: int
    n_train: int
    n_test: int


class ProbeGrid(BaseModel):
    """Probe test accuracy per (residual layer, position label)"""
    layers: List[int]
    positions: List[str]
    cells: List[ProbeCell] = Field(default_factory=list)

    def accuracy(self, split: str = "test") -> List[List[float]]:
        """layers x positions matrix"""
        lookup = {(c.layer, c.position): c for c in self.cells}
        key = "test_accuracy" if split == "test" else "train_accuracy"
        return [[getattr(lookup[(l, p)], key) for p in self.positions] for l in self.layers]

    def best_layer(self, position: str) -> int:
        column = [c for c in self.cells if c.position == position]
        if not column:
            raise KeyError(f"no probe cells at position {position!r}")
        return max(column, key=lambda c: (c.test_accuracy, -c.layer)).layer
