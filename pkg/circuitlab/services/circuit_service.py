# circuitlab/services/circuit_service.py - Circuit runs, faithfulness, banded search, intersections
import logging
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from circuitlab.core.config import settings
from circuitlab.core.errors import CircuitError, DegenerateMetricError
from circuitlab.models.transformer import Parameters, mask_plan, run, run_with_cache
from circuitlab.schemas.circuit import (
    AttributionTable,
    Circuit,
    Member,
    OverlapResult,
    Provenance,
    SearchResult,
    SearchStep,
)
from circuitlab.schemas.config import SearchConfig
from circuitlab.schemas.dataset import MetricSpec, PromptPair
from circuitlab.services.patching_service import PairMetric, check_same_template, label_map_of

logger = logging.getLogger(__name__)

TauLike = Union[Fraction, str, float, int]


def _group(pairs: Sequence[PromptPair]) -> Dict[Tuple, List[int]]:
    groups: Dict[Tuple, List[int]] = {}
    for i, pair in enumerate(pairs):
        groups.setdefault((pair.operation, pair.template_id, pair.task, pair.length), []).append(i)
    return groups


def circuit_masks(params: Parameters, circuit: Circuit, pair: PromptPair) -> np.ndarray:
    """(n_edges, seq) True where an edge instance is NOT in the circuit (gets patched)"""
    graph = params.graph
    label_map = label_map_of(pair)
    patch = np.ones((len(graph), pair.length), dtype=bool)
    for member in circuit.members:
        if not label_map.has_label(member.pos_label):
            continue
        patch[graph.edge_index(member.src, member.dst), label_map.index_of(member.pos_label)] = False
    return patch


def check_fingerprint(params: Parameters, circuit: Circuit, fingerprint: Optional[str] = None):
    expected = fingerprint or params.fingerprint()
    if circuit.model_fingerprint != expected:
        raise CircuitError(
            f"circuit belongs to model {circuit.model_fingerprint[:12]}, not {expected[:12]}"
        )


def _check_domain(params_domain: str, pair: PromptPair):
    domain = f"{pair.operation.value}/abstract-v1"
    if params_domain != domain:
        raise CircuitError(f"circuit label domain {params_domain} does not match pairs of {domain}")


class FaithfulnessEvaluator:
    """Caches the clean/corrupt runs of one template's pairs so many circuits can be scored"""

    def __init__(self, params: Parameters, pairs: Sequence[PromptPair], metric: Optional[MetricSpec] = None,
                 offset: int = 0):
        check_same_template(pairs)
        self.params = params
        self.pairs = list(pairs)
        self.metric = PairMetric.for_pairs(pairs, metric)
        self.clean = np.array([p.clean_tokens for p in pairs])
        corrupt = np.array([p.corrupt_tokens for p in pairs])
        clean_logits = run(params, self.clean)
        corrupt_logits, self.corrupt_cache = run_with_cache(params, corrupt)
        self.m_clean = self.metric.values(clean_logits)
        self.m_corrupt = self.metric.values(corrupt_logits)
        gap = self.m_clean - self.m_corrupt
        eps = settings.FAITHFULNESS_DEGENERATE_EPS
        bad = np.flatnonzero(np.abs(gap) < eps)
        if bad.size:
            raise DegenerateMetricError(offset + int(bad[0]), float(gap[bad[0]]))
        self.gap = gap

    def logits(self, patch_masks: np.ndarray) -> np.ndarray:
        return run(self.params, self.clean, mask_plan(self.params, self.corrupt_cache, patch_masks))

    def per_pair(self, patch_masks: np.ndarray) -> np.ndarray:
        """Percent of the clean/corrupt logit difference recovered, per pair"""
        c_clean = self.metric.values(self.logits(patch_masks))
        return 100.0 * (c_clean - self.m_corrupt) / self.gap


class CircuitService:
    """Circuit evaluation and construction"""

    @staticmethod
    def run_circuit(params: Parameters, circuit: Circuit, pairs: Union[PromptPair, Sequence[PromptPair]]) -> np.ndarray:
        """Clean run with every edge instance outside the circuit patched with its corrupt activation"""
        single = isinstance(pairs, PromptPair)
        pairs = [pairs] if single else list(pairs)
        check_same_template(pairs)
        check_fingerprint(params, circuit)
        _check_domain(circuit.domain, pairs[0])
        clean = np.array([p.clean_tokens for p in pairs])
        _, corrupt_cache = run_with_cache(params, np.array([p.corrupt_tokens for p in pairs]))
        logits = run(params, clean, mask_plan(params, corrupt_cache, circuit_masks(params, circuit, pairs[0])))
        return logits[0] if single else logits

    @staticmethod
    def faithfulness_per_pair(
        params: Parameters, circuit: Circuit, pairs: Sequence[PromptPair], metric: Optional[MetricSpec] = None
    ) -> np.ndarray:
        if not pairs:
            raise CircuitError("faithfulness needs at least one pair")
        check_fingerprint(params, circuit)
        values = np.zeros(len(pairs))
        for indices in _group(pairs).values():
            group = [pairs[i] for i in indices]
            _check_domain(circuit.domain, group[0])
            evaluator = FaithfulnessEvaluator(params, group, metric, offset=indices[0])
            values[indices] = evaluator.per_pair(circuit_masks(params, circuit, group[0]))
        return values

    @staticmethod
    def faithfulness(
        params: Parameters, circuit: Circuit, pairs: Sequence[PromptPair], metric: Optional[MetricSpec] = None
    ) -> float:
        """Mean over pairs of (C_clean - M_corrupt) / (M_clean - M_corrupt) x 100"""
        return float(CircuitService.faithfulness_per_pair(params, circuit, pairs, metric).mean())

    @staticmethod
    def cross_faithfulness(
        params: Parameters, circuit: Circuit, pair_sets: Dict[str, Sequence[PromptPair]]
    ) -> Dict[str, float]:
        """Faithfulness of one circuit on each named pair set (e.g. result and answer errors)"""
        return {name: CircuitService.faithfulness(params, circuit, pairs) for name, pairs in pair_sets.items()}

    # ------------------------------------------------------------------
    # Search
    # ------------------------------------------------------------------

    @staticmethod
    def search_minimal_circuit(
        table: AttributionTable,
        params: Parameters,
        pairs: Sequence[PromptPair],
        cfg: Optional[SearchConfig] = None,
    ) -> Tuple[Circuit, SearchResult]:
        """First prefix of size k, k+n, k+2n, ... of the ranked table whose faithfulness is in band"""
        cfg = cfg or SearchConfig()
        check_same_template(pairs)
        pair = pairs[0]
        if (pair.template_id, pair.operation.value, pair.length) != (
            table.template_id, table.operation, len(table.position_labels)
        ):
            raise CircuitError("attribution table and pairs come from different templates")

        pairs = list(pairs)[: cfg.eval_pairs]
        evaluator = FaithfulnessEvaluator(params, pairs)
        ranked = table.ranked()
        total = len(ranked)
        low, high = cfg.band

        trajectory: List[SearchStep] = []
        best: Optional[Tuple[float, int]] = None
        chosen: Optional[int] = None
        size = min(cfg.k, total)
        while True:
            patch = np.ones(table.scores.shape, dtype=bool)
            for edge_index, position, _ in ranked[:size]:
                patch[edge_index, position] = False
            score = float(evaluator.per_pair(patch).mean())
            in_band = low <= score <= high
            trajectory.append(SearchStep(size=size, faithfulness=score, in_band=in_band))
            logger.info(f"search t{table.template_id}: {size} instances -> {score:.2f}%")
            if best is None or abs(score - 100.0) < abs(best[0] - 100.0):
                best = (score, size)
            if in_band:
                chosen = size
                break
            if size >= total or (cfg.max_steps and len(trajectory) >= cfg.max_steps):
                break
            size = min(size + cfg.n, total)

        flagged = chosen is None
        final_score, final_size = (trajectory[-1].faithfulness, chosen) if not flagged else best
        if flagged:
            logger.warning(
                f"search t{table.template_id}: band [{low}, {high}] not reached, "
                f"returning best-effort circuit of {final_size} instances ({final_score:.2f}%)"
            )
        members = frozenset(table.member(e, p) for e, p, _ in ranked[:final_size])
        circuit = Circuit(
            members=members,
            model_fingerprint=params.fingerprint(),
            domain=table.domain,
            provenance=Provenance(
                source="search",
                operation=table.operation,
                template_ids=[table.template_id],
                error_type=",".join(table.metadata.get("error_types", [])) or None,
                faithfulness=final_score,
                flagged=flagged,
                steps=len(trajectory),
            ),
        )
        result = SearchResult(
            circuit_size=len(members),
            faithfulness=final_score,
            flagged=flagged,
            trajectory=trajectory,
            total_instances=total,
        )
        return circuit, result

    # ------------------------------------------------------------------
    # Set algebra
    # ------------------------------------------------------------------

    @staticmethod
    def _check_compatible(circuits: Sequence[Circuit]):
        if not circuits:
            raise CircuitError("no circuits given")
        domains = {c.domain for c in circuits}
        if len(domains) != 1:
            raise CircuitError(f"mismatched label domains: {sorted(domains)}")
        fingerprints = {c.model_fingerprint for c in circuits}
        if len(fingerprints) != 1:
            raise CircuitError("circuits come from different models")

    @staticmethod
    def soft_intersection(circuits: Sequence[Circuit], tau: TauLike) -> Circuit:
        """Members whose membership fraction across the circuits is at least tau"""
        CircuitService._check_compatible(circuits)
        tau = Fraction(tau).limit_denominator(1000) if isinstance(tau, float) else Fraction(tau)
        if not 0 < tau <= 1:
            raise CircuitError(f"tau must lie in (0, 1], got {tau}")
        counts: Dict[Member, int] = {}
        for circuit in circuits:
            for member in circuit.members:
                counts[member] = counts.get(member, 0) + 1
        k = len(circuits)
        members = frozenset(m for m, c in counts.items() if Fraction(c, k) >= tau)
        template_ids = sorted({t for c in circuits for t in c.provenance.template_ids})
        return Circuit(
            members=members,
            model_fingerprint=circuits[0].model_fingerprint,
            domain=circuits[0].domain,
            provenance=Provenance(
                source="intersection",
                operation=circuits[0].provenance.operation,
                template_ids=template_ids,
                error_type=circuits[0].provenance.error_type,
                tau=str(tau),
            ),
        )

    @staticmethod
    def overlap(c1: Circuit, c2: Circuit) -> OverlapResult:
        if c1.domain != c2.domain:
            raise CircuitError(f"mismatched label domains: {c1.domain} vs {c2.domain}")
        if not c1.members or not c2.members:
            raise CircuitError("overlap is undefined for an empty circuit")
        inter = c1.members & c2.members
        union = c1.members | c2.members
        per_label: Dict[str, Dict[str, float]] = {}
        for label in sorted({m.pos_label for m in union}):
            a = {m for m in c1.members if m.pos_label == label}
            b = {m for m in c2.members if m.pos_label == label}
            per_label[label] = {"intersection": len(a & b), "union": len(a | b)}
        return OverlapResult(
            iou=len(inter) / len(union),
            iom=len(inter) / min(len(c1), len(c2)),
            intersection=len(inter),
            union=len(union),
            per_label=per_label,
        )

    @staticmethod
    def set_ops(c1: Circuit, c2: Circuit, op: str) -> Circuit:
        CircuitService._check_compatible([c1, c2])
        if op == "union":
            members = c1.members | c2.members
        elif op == "intersection":
            members = c1.members & c2.members
        else:
            raise CircuitError(f"unknown set operation {op!r}, expected union or intersection")
        error_types = sorted({e for c in (c1, c2) if c.provenance.error_type for e in c.provenance.error_type.split(",")})
        return Circuit(
            members=frozenset(members),
            model_fingerprint=c1.model_fingerprint,
            domain=c1.domain,
            provenance=Provenance(
                source=op,
                operation=c1.provenance.operation,
                template_ids=sorted(set(c1.provenance.template_ids) | set(c2.provenance.template_ids)),
                error_type=",".join(error_types) or None,
            ),
        )

    @staticmethod
    def full_circuit(params: Parameters, label_map, operation: str = "add") -> Circuit:
        """Every edge at every position of one template"""
        members = frozenset(
            Member(src.text, dst.text, label_map.label_of(p))
            for src, dst in params.graph.edges
            for p in range(label_map.length)
        )
        return Circuit(members, params.fingerprint(), f"{operation}/abstract-v1",
                       Provenance(source="manual", operation=operation, template_ids=[label_map.template_id]))


def run_circuit(params, circuit, pair):
    return CircuitService.run_circuit(params, circuit, pair)


def faithfulness(params, circuit, pairs) -> float:
    return CircuitService.faithfulness(params, circuit, pairs)


def search_minimal_circuit(table, params, pairs, cfg=None):
    return CircuitService.search_minimal_circuit(table, params, pairs, cfg)


def soft_intersection(circuits, tau) -> Circuit:
    return CircuitService.soft_intersection(circuits, tau)


def overlap(c1, c2) -> Tuple[float, float]:
    result = CircuitService.overlap(c1, c2)
    return result.iou, result.iom


def set_ops(c1, c2, op) -> Circuit:
    return CircuitService.set_ops(c1, c2, op)
