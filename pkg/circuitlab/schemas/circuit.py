# circuitlab/schemas/circuit.py
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Dict, FrozenSet, Iterable, List, NamedTuple, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator


class Member(NamedTuple):
    """One circuit membership: an edge at an abstract token position"""
    src: str
    dst: str
    pos_label: str

    @property
    def edge(self) -> str:
        return f"{self.src}->{self.dst}"


class Provenance(BaseModel):
    source: str = "search"  # search | intersection | union | manual
    operation: str = "add"
    template_ids: List[int] = Field(default_factory=list)
    error_type: Optional[str] = None
    tau: Optional[str] = None  # exact fraction, e.g. "5/8"
    faithfulness: Optional[float] = None
    flagged: bool = False  # search left the band unreached
    steps: int = 0

    @field_validator("tau")
    @classmethod
    def check_tau(cls, v):
        if v is not None:
            tau = Fraction(v)
            if not 0 < tau <= 1:
                raise ValueError(f"tau must lie in (0, 1], got {v}")
        return v


@dataclass(frozen=True)
class Circuit:
    members: FrozenSet[Member]
    model_fingerprint: str
    domain: str  # "<operation>/abstract-v1"
    provenance: Provenance = field(default_factory=Provenance, compare=False)

    def __len__(self) -> int:
        return len(self.members)

    def __contains__(self, member) -> bool:
        return Member(*member) in self.members

    def sorted_members(self) -> List[Member]:
        return sorted(self.members)

    def labels(self) -> List[str]:
        return sorted({m.pos_label for m in self.members})

    def to_json(self) -> Dict[str, Any]:
        return {
            "model_fingerprint": self.model_fingerprint,
            "domain": self.domain,
            "provenance": self.provenance.model_dump(),
            "members": [m._asdict() for m in self.sorted_members()],
        }

    @classmethod
    def from_json(cls, payload: Dict[str, Any]) -> "Circuit":
        members = frozenset(
            Member(m["src"], m["dst"], m["pos_label"]) for m in payload.get("members", [])
        )
        return cls(
            members=members,
            model_fingerprint=payload["model_fingerprint"],
            domain=payload.get("domain", "add/abstract-v1"),
            provenance=Provenance(**payload.get("provenance", {})),
        )


@dataclass
class AttributionTable:
    """Per edge x position attribution scores, rows follow `edges`, columns are token positions"""
    edges: List[Tuple[str, str]]
    scores: np.ndarray  # (n_edges, seq_len), non-negative
    position_labels: List[str]
    template_id: int
    operation: str = "add"
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (len(self.edges), len(self.position_labels)):
            raise ValueError(
                f"scores shape {self.scores.shape} does not match "
                f"{len(self.edges)} edges x {len(self.position_labels)} positions"
            )
        if (self.scores < 0).any():
            raise ValueError("attribution scores must be non-negative")

    @property
    def domain(self) -> str:
        return f"{self.operation}/abstract-v1"

    def __len__(self) -> int:
        return int(self.scores.size)

    def ranked(self) -> List[Tuple[int, int, float]]:
        """(edge index, position, score) by descending score; ties keep graph then position order"""
        flat = self.scores.reshape(-1)
        order = np.argsort(-flat, kind="stable")
        n_pos = self.scores.shape[1]
        return [(int(i // n_pos), int(i % n_pos), float(flat[i])) for i in order]

    def member(self, edge_index: int, position: int) -> Member:
        src, dst = self.edges[edge_index]
        return Member(src, dst, self.position_labels[position])

    def entries(self) -> Iterable[Dict[str, Any]]:
        for edge_index, position, score in self.ranked():
            src, dst = self.edges[edge_index]
            yield {
                "edge": f"{src}->{dst}",
                "src": src,
                "dst": dst,
                "pos": position,
                "pos_label": self.position_labels[position],
                "score": score,
            }

    def to_json(self) -> Dict[str, Any]:
        return {
            "template_id": self.template_id,
            "operation": self.operation,
            "position_labels": self.position_labels,
            "metadata": self.metadata,
            "entries": list(self.entries()),
        }

    @classmethod
    def from_json(cls, payload: Dict[str, Any], edges: List[Tuple[str, str]]) -> "AttributionTable":
        """Rebuild the dense table; `edges` fixes the row order (the model's graph)"""
        labels = payload["position_labels"]
        index = {edge: i for i, edge in enumerate(edges)}
        scores = np.zeros((len(edges), len(labels)))
        for entry in payload["entries"]:
            key = (entry["src"], entry["dst"])
            if key not in index:
                raise KeyError(f"unknown edge {entry['edge']}")
            scores[index[key], entry["pos"]] = entry["score"]
        return cls(
            edges=list(edges),
            scores=scores,
            position_labels=labels,
            template_id=payload["template_id"],
            operation=payload.get("operation", "add"),
            metadata=payload.get("metadata", {}),
        )


class SearchStep(BaseModel):
    size: int
    faithfulness: float
    in_band: bool


class SearchResult(BaseModel):
    circuit_size: int
    faithfulness: float
    flagged: bool
    trajectory: List[SearchStep]
    total_instances: int

    @property
    def fraction(self) -> float:
        return self.circuit_size / max(self.total_instances, 1)


class TauSweepRow(BaseModel):
    tau: str
    edge_count: int
    faithfulness_mean: float
    faithfulness_std: float
    best_balance: bool = False


class OverlapResult(BaseModel):
    iou: float
    iom: float
    intersection: int
    union: int
    per_label: Dict[str, Dict[str, float]] = Field(default_factory=dict)
