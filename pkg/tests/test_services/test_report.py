# tests/test_services/test_report.py - tau sweep, DOT export and the validation-gap signature
import pytest

from circuitlab.core.errors import CircuitError
from circuitlab.schemas.circuit import Circuit, Member
from circuitlab.schemas.intervention import (
    AccuracyDelta,
    BridgeReport,
    HeadPatchReport,
    InterventionKind,
    InterventionSpec,
)
from circuitlab.schemas.report import AccuracyRow, AccuracySummary, ProbeCell, ProbeGrid
from circuitlab.services.circuit_service import CircuitService
from circuitlab.services.dataset_service import generate_pairs, label_positions
from circuitlab.services.report_service import ReportService


def _small_circuit():
    members = frozenset({
        Member("embed", "A.1.0.V", "equals"),
        Member("A.1.0.O", "logits", "final"),
        Member("A.0.1.O", "MLP in 0", "equals"),
    })
    return Circuit(members, "f" * 64, "add/abstract-v1")


def _delta(before, after, n=10):
    return AccuracyDelta(accuracy_before=before, accuracy_after=after,
                         invalid_rate_before=before, invalid_rate_after=after, n_pairs=n)


def _summary(error_type, mean):
    return AccuracySummary(error_type=error_type, mean=mean, std=1.0, per_template=[
        AccuracyRow(template_id=1, error_type=error_type, mean=mean - 1, n_pairs=5),
        AccuracyRow(template_id=2, error_type=error_type, mean=mean + 1, n_pairs=7),
    ])


def _head_patch(head_gain, control_gain):
    spec = InterventionSpec(kind=InterventionKind.HEAD_PATTERN, heads=[(1, 0)], alpha=3.1)
    return HeadPatchReport(spec=spec, direction="forward", target_condition="both",
                           source_condition="answer+result", result=_delta(40, 40 + head_gain),
                           control_heads=[(0, 1)], control=_delta(40, 40 + control_gain))


def _probe_grid(best_layer):
    cells = [
        ProbeCell(layer=l, position="equals", train_accuracy=0.5, test_accuracy=0.9 if l == best_layer else 0.3,
                  n_classes=9, n_train=100, n_test=20)
        for l in range(3)
    ]
    return ProbeGrid(layers=[0, 1, 2], positions=["equals"], cells=cells)


def _bridge_report(gain, single_drop):
    spec = InterventionSpec(kind=InterventionKind.RESIDUAL_BRIDGE, src_layer=2, src_pos="result-first",
                            dst_layer=0, dst_pos="result-second")
    return BridgeReport(spec=spec, consistent=_delta(30, 30 + gain),
                        single={"result": _delta(90, 90 - single_drop)})


def test_dot_export_is_deterministic():
    first = ReportService.export_dot(_small_circuit(), n_layers=2)
    assert first == ReportService.export_dot(_small_circuit(), n_layers=2)
    assert "rankdir=BT" in first
    assert first.count("subgraph cluster_") == 2
    assert '"equals|A.0.1.O" -> "equals|MLP in 0"' in first
    assert "label=final" in first


def test_empty_circuit_exports_without_edges():
    source = ReportService.export_dot(Circuit(frozenset(), "f" * 64, "add/abstract-v1"))
    assert "->" not in source


def test_signature_fails_without_inputs():
    signature = ReportService.signature()
    assert [c.name for c in signature.checks] == [
        "accuracy-gap", "head-patch-vs-control", "probe-upper-layers", "residual-bridge",
    ]
    assert not any(c.passed for c in signature.checks)
    assert not signature.gate_passed


def test_signature_passes_on_validation_gap():
    signature = ReportService.signature(
        single=_summary("single", 90.0),
        consistent=_summary("both", 40.0),
        head_patch=_head_patch(head_gain=25.0, control_gain=1.0),
        probe_grid=_probe_grid(best_layer=2),
        bridge=_bridge_report(gain=15.0, single_drop=3.0),
        n_layers=2,
    )
    assert all(c.passed for c in signature.checks)
    assert signature.gate_passed


def test_signature_failures_are_separate():
    signature = ReportService.signature(
        single=_summary("single", 90.0),
        consistent=_summary("both", 85.0),
        head_patch=_head_patch(head_gain=25.0, control_gain=1.0),
        probe_grid=_probe_grid(best_layer=0),
        bridge=_bridge_report(gain=15.0, single_drop=30.0),
        n_layers=2,
    )
    verdicts = {c.name: c.verdict for c in signature.checks}
    assert verdicts == {
        "accuracy-gap": "FAIL",
        "head-patch-vs-control": "PASS",
        "probe-upper-layers": "FAIL",
        "residual-bridge": "FAIL",
    }
    assert not signature.gate_passed


def test_accuracy_rows():
    rows = ReportService.accuracy_rows([_summary("result", 80.0)])
    assert [r["template_id"] for r in rows] == [1, 2, "mean"]
    assert rows[-1]["n_pairs"] == 12


def test_tau_sweep(tiny_params, result_pairs):
    circuits = [
        CircuitService.full_circuit(tiny_params, label_positions(template_id)) for template_id in (1, 2)
    ]
    pairs = {1: result_pairs, 2: generate_pairs(2, 4, "result", seed=0)}
    rows = ReportService.tau_sweep_report(tiny_params, circuits, pairs)
    assert [r.tau for r in rows] == ["1/2", "1"]
    assert rows[0].faithfulness_mean == pytest.approx(100.0)
    assert rows[0].best_balance
    assert rows[0].edge_count >= rows[1].edge_count
    with pytest.raises(CircuitError):
        ReportService.tau_sweep_report(tiny_params, circuits[:1], pairs)
    with pytest.raises(CircuitError):
        ReportService.tau_sweep_report(tiny_params, circuits, pairs, balance="largest")
