# circuitlab/services/report_service.py - tau sweeps, DOT export, validation-gap signature
import logging
from fractions import Fraction
from typing import Dict, List, Optional, Sequence

import numpy as np
from graphviz import Digraph

from circuitlab.core.config import settings
from circuitlab.core.errors import CircuitError
from circuitlab.models.graph import EMBED, RESID_FINAL, NodeId
from circuitlab.models.transformer import Parameters
from circuitlab.schemas.circuit import Circuit, TauSweepRow
from circuitlab.schemas.dataset import PromptPair
from circuitlab.schemas.intervention import BridgeReport, HeadPatchReport
from circuitlab.schemas.report import AccuracySummary, ProbeGrid, Signature, SignatureCheck
from circuitlab.services.circuit_service import CircuitService, FaithfulnessEvaluator, circuit_masks

logger = logging.getLogger(__name__)

BALANCE_MODES = ("smallest", "sparsest")


def _layer_of(node: NodeId, n_layers: int) -> int:
    if node.kind == EMBED:
        return -1
    if node.kind == RESID_FINAL:
        return n_layers
    return node.layer


class ReportService:
    """Human-readable summaries built from pipeline outputs"""

    @staticmethod
    def tau_sweep_report(
        params: Parameters,
        circuits: Sequence[Circuit],
        pairs_by_template: Dict[int, Sequence[PromptPair]],
        balance: str = "smallest",
    ) -> List[TauSweepRow]:
        """
        One row per tau in {1/k, ..., k/k} for k template circuits: size of the soft
        intersection and its faithfulness averaged over the templates' pairs.
        """
        if len(circuits) < 2:
            raise CircuitError(f"tau sweep needs at least 2 template circuits, got {len(circuits)}")
        if balance not in BALANCE_MODES:
            raise CircuitError(f"unknown balance mode {balance!r}, expected one of {BALANCE_MODES}")
        evaluators = {
            template_id: FaithfulnessEvaluator(params, pairs)
            for template_id, pairs in sorted(pairs_by_template.items()) if pairs
        }
        if not evaluators:
            raise CircuitError("tau sweep needs evaluation pairs")

        k = len(circuits)
        rows = []
        for j in range(1, k + 1):
            tau = Fraction(j, k)
            circuit = CircuitService.soft_intersection(circuits, tau)
            scores = [
                float(evaluator.per_pair(circuit_masks(params, circuit, evaluator.pairs[0])).mean())
                for evaluator in evaluators.values()
            ]
            rows.append(TauSweepRow(
                tau=str(tau),
                edge_count=len(circuit),
                faithfulness_mean=float(np.mean(scores)),
                faithfulness_std=float(np.std(scores)),
            ))
            logger.info(f"tau {tau}: {len(circuit)} instances, faithfulness {rows[-1].faithfulness_mean:.2f}")

        eligible = [r for r in rows if r.faithfulness_mean >= settings.FAITHFULNESS_BAND_LOW]
        if eligible:
            best = eligible[0] if balance == "smallest" else eligible[-1]
            best.best_balance = True
        return rows

    @staticmethod
    def export_dot(circuit: Circuit, n_layers: Optional[int] = None, name: str = "circuit") -> str:
        """
        One column (cluster) per position label, nodes ranked bottom-up by layer. Node
        captions follow A.layer.head.{Q,K,V,O}; output is deterministic.
        """
        graph = Digraph(name=name)
        graph.attr(rankdir="BT", newrank="true")
        graph.attr("node", shape="box", fontsize="10")
        members = circuit.sorted_members()
        if not members:
            return graph.source

        nodes = {}
        for member in members:
            for text in (member.src, member.dst):
                nodes[(member.pos_label, text)] = NodeId.parse(text)
        top = n_layers if n_layers is not None else max(
            (n.layer for n in nodes.values() if n.layer >= 0), default=0
        ) + 1

        def node_id(label: str, text: str) -> str:
            return f"{label}|{text}"

        for column, label in enumerate(circuit.labels()):
            with graph.subgraph(name=f"cluster_{column}") as cluster:
                cluster.attr(label=label)
                for (node_label, text), node in sorted(nodes.items()):
                    if node_label == label:
                        cluster.node(node_id(label, text), text, group=label)
        by_layer: Dict[int, List[str]] = {}
        for (label, text), node in sorted(nodes.items()):
            by_layer.setdefault(_layer_of(node, top), []).append(node_id(label, text))
        for layer in sorted(by_layer):
            with graph.subgraph() as row:
                row.attr(rank="same")
                for identifier in by_layer[layer]:
                    row.node(identifier)
        for member in members:
            graph.edge(node_id(member.pos_label, member.src), node_id(member.pos_label, member.dst))
        return graph.source

    @staticmethod
    def accuracy_rows(summaries: Sequence[AccuracySummary]) -> List[Dict]:
        rows = []
        for summary in summaries:
            for row in summary.per_template:
                rows.append({
                    "error_type": summary.error_type,
                    "template_id": row.template_id,
                    "accuracy": round(row.mean, 4),
                    "n_pairs": row.n_pairs,
                })
            rows.append({
                "error_type": summary.error_type,
                "template_id": "mean",
                "accuracy": round(summary.mean, 4),
                "n_pairs": sum(r.n_pairs for r in summary.per_template),
            })
        return rows

    @staticmethod
    def signature(
        single: Optional[AccuracySummary] = None,
        consistent: Optional[AccuracySummary] = None,
        head_patch: Optional[HeadPatchReport] = None,
        probe_grid: Optional[ProbeGrid] = None,
        bridge: Optional[BridgeReport] = None,
        n_layers: Optional[int] = None,
        probe_position: str = "equals",
    ) -> Signature:
        """PASS/FAIL per validation-gap criterion; missing inputs fail their check"""
        checks = []

        gap = single.mean - consistent.mean if single and consistent else None
        checks.append(SignatureCheck(
            name="accuracy-gap",
            description="consistent-error accuracy at least the minimum gap below single-error accuracy",
            passed=gap is not None and gap >= settings.SIGNATURE_MIN_GAP,
            value=gap,
            threshold=settings.SIGNATURE_MIN_GAP,
            gating=True,
        ))

        head_delta = control_delta = None
        if head_patch is not None and head_patch.control is not None:
            head_delta = head_patch.result.accuracy_delta
            control_delta = head_patch.control.accuracy_delta
        checks.append(SignatureCheck(
            name="head-patch-vs-control",
            description="consistency-head patch raises consistent-error accuracy more than random heads",
            passed=head_delta is not None and head_delta > control_delta,
            value=head_delta,
            threshold=control_delta,
            gating=True,
        ))

        best = None
        if probe_grid is not None and probe_position in probe_grid.positions:
            best = probe_grid.best_layer(probe_position)
        depth = n_layers if n_layers is not None else (max(probe_grid.layers) if probe_grid else None)
        checks.append(SignatureCheck(
            name="probe-upper-layers",
            description=f"result probe at {probe_position} peaks in the upper half of layers",
            passed=best is not None and depth is not None and best >= depth / 2,
            value=None if best is None else float(best),
            threshold=None if depth is None else depth / 2,
        ))

        bridge_delta = worst_drop = None
        if bridge is not None:
            bridge_delta = bridge.consistent.accuracy_delta
            worst_drop = max((-d.accuracy_delta for d in bridge.single.values()), default=0.0)
        checks.append(SignatureCheck(
            name="residual-bridge",
            description="bridging raises consistent-error accuracy without collapsing single-error accuracy",
            passed=bridge_delta is not None and bridge_delta > 0
            and worst_drop <= settings.BRIDGE_SINGLE_ERROR_TOLERANCE,
            value=bridge_delta,
            threshold=settings.BRIDGE_SINGLE_ERROR_TOLERANCE,
        ))
        for check in checks:
            logger.info(f"signature {check.name}: {check.verdict}")
        return Signature(checks=checks)


def tau_sweep_report(params, circuits, pairs_by_template, balance="smallest") -> List[TauSweepRow]:
    return ReportService.tau_sweep_report(params, circuits, pairs_by_template, balance)


def export_dot(circuit: Circuit, n_layers: Optional[int] = None) -> str:
    return ReportService.export_dot(circuit, n_layers)
