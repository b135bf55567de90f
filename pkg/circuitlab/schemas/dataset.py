# circuitlab/schemas/dataset.py
from enum import Enum
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field, ValidationInfo, field_validator


class ErrorType(str, Enum):
    RESULT = "result"  # wrong value at the arithmetic result
    ANSWER = "answer"  # wrong value at the final numeric answer
    BOTH = "both"      # the same wrong value at both sites (consistent error)
    NONE = "none"


class Operation(str, Enum):
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    DIV = "div"


# Abstract position labels shared by every template
POSITION_LABELS = (
    "bos",
    "num1-in-problem",
    "num2-in-problem",
    "op1-in-eq",
    "operator",
    "op2-in-eq",
    "equals",
    "result-first",
    "result-second",
    "answer-first",
    "answer-second",
    "final",
)


class TokenLabelMap(BaseModel):
    """Abstract label -> token index for one template"""
    template_id: int
    operation: Operation
    length: int
    labels: Dict[str, int]

    @field_validator("labels")
    @classmethod
    def check_injective(cls, v):
        if len(set(v.values())) != len(v):
            raise ValueError("position labels must map to distinct token indices")
        return v

    def index_of(self, label: str) -> int:
        if label in self.labels:
            return self.labels[label]
        # Unlabelled positions are template-specific: "t<id>:pos<index>"
        prefix = f"t{self.template_id}:pos"
        if label.startswith(prefix) and label[len(prefix):].isdigit():
            index = int(label[len(prefix):])
            if 0 <= index < self.length:
                return index
        raise KeyError(f"label {label!r} not defined for template {self.template_id}")

    def has_label(self, label: str) -> bool:
        try:
            self.index_of(label)
        except KeyError:
            return False
        return True

    def label_of(self, position: int) -> str:
        if not 0 <= position < self.length:
            raise IndexError(f"position {position} outside prompt of length {self.length}")
        for label, index in self.labels.items():
            if index == position:
                return label
        return f"t{self.template_id}:pos{position}"

    def all_labels(self) -> List[str]:
        return [self.label_of(p) for p in range(self.length)]

    @property
    def domain(self) -> str:
        return f"{self.operation.value}/abstract-v1"


class PromptPair(BaseModel):
    """Aligned clean/corrupt prompts. The clean prompt carries the error the model should flag."""
    template_id: int = Field(..., ge=1, le=8)
    operation: Operation = Operation.ADD
    error_type: ErrorType
    task: str = "validation"  # validation | computation
    clean_tokens: List[int]
    corrupt_tokens: List[int]
    clean_labels: List[int]    # answer token ids expected for the clean prompt
    corrupt_labels: List[int]  # answer token ids expected for the corrupt prompt
    variables: Dict[str, Any] = Field(default_factory=dict)
    position_labels: Dict[str, int] = Field(default_factory=dict)

    @field_validator("corrupt_tokens")
    @classmethod
    def check_lengths(cls, v, info: ValidationInfo):
        clean = info.data.get("clean_tokens")
        if clean is not None and len(clean) != len(v):
            raise ValueError(f"clean/corrupt lengths differ: {len(clean)} != {len(v)}")
        return v

    @field_validator("corrupt_labels")
    @classmethod
    def check_label_sets(cls, v, info: ValidationInfo):
        clean = info.data.get("clean_labels")
        if not v or not clean:
            raise ValueError("label token sets must be non-empty")
        if set(v) & set(clean):
            raise ValueError("clean and corrupt label token sets must be disjoint")
        return v

    @property
    def length(self) -> int:
        return len(self.clean_tokens)

    def to_record(self) -> Dict[str, Any]:
        """JSONL record layout"""
        return {
            "template_id": self.template_id,
            "operation": self.operation.value,
            "error_type": self.error_type.value,
            "task": self.task,
            "clean_tokens": self.clean_tokens,
            "corrupt_tokens": self.corrupt_tokens,
            "labels": {"clean": self.clean_labels, "corrupt": self.corrupt_labels},
            "position_labels": self.position_labels,
            "variables": self.variables,
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "PromptPair":
        labels = record.get("labels", {})
        return cls(
            template_id=record["template_id"],
            operation=record.get("operation", "add"),
            error_type=record["error_type"],
            task=record.get("task", "validation"),
            clean_tokens=record["clean_tokens"],
            corrupt_tokens=record["corrupt_tokens"],
            clean_labels=labels["clean"],
            corrupt_labels=labels["corrupt"],
            position_labels=record.get("position_labels", {}),
            variables=record.get("variables", {}),
        )


class MetricSpec(BaseModel):
    """Logit difference between clean and corrupt answer tokens at one position"""
    clean_token_ids: List[int]
    corrupt_token_ids: List[int]
    position: int = -1  # default: final position
    scale: float = Field(1.0, gt=0)

    @field_validator("corrupt_token_ids")
    @classmethod
    def check_disjoint(cls, v, info: ValidationInfo):
        clean = info.data.get("clean_token_ids")
        if clean is not None and set(clean) & set(v):
            raise ValueError("clean and corrupt token sets must be disjoint")
        return v

    @classmethod
    def for_pair(cls, pair: PromptPair, position: Optional[int] = None) -> "MetricSpec":
        return cls(
            clean_token_ids=pair.clean_labels,
            corrupt_token_ids=pair.corrupt_labels,
            position=-1 if position is None else position,
        )
