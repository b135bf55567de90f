# tests/test_services/test_circuits.py - Faithfulness, banded search and circuit algebra
from fractions import Fraction

import numpy as np
import pytest

from circuitlab.core.errors import CircuitError
from circuitlab.schemas.circuit import AttributionTable, Circuit, Member, Provenance
from circuitlab.schemas.config import SearchConfig
from circuitlab.services.circuit_service import CircuitService, circuit_masks
from circuitlab.services.dataset_service import generate_pairs, label_positions
from circuitlab.services.patching_service import label_map_of

FINGERPRINT = "f" * 64


def _circuit(names, fingerprint=FINGERPRINT, domain="add/abstract-v1", template_ids=(1,)):
    members = frozenset(Member(f"src-{n}", "logits", "equals") for n in names)
    return Circuit(members, fingerprint, domain, Provenance(template_ids=list(template_ids)))


def _random_table(params, template_id=1, seed=0):
    label_map = label_positions(template_id)
    rng = np.random.default_rng(seed)
    return AttributionTable(
        edges=params.graph.edge_texts(),
        scores=rng.random((len(params.graph), label_map.length)),
        position_labels=label_map.all_labels(),
        template_id=template_id,
        metadata={"error_types": ["result"]},
    )


@pytest.fixture(scope="module")
def full(tiny_params, result_pairs):
    return CircuitService.full_circuit(tiny_params, label_map_of(result_pairs[0]))


def test_full_circuit_is_fully_faithful(tiny_params, result_pairs, full):
    assert CircuitService.faithfulness(tiny_params, full, result_pairs) == pytest.approx(100.0, abs=1e-9)


def test_empty_circuit_recovers_nothing(tiny_params, result_pairs):
    empty = Circuit(frozenset(), tiny_params.fingerprint(), "add/abstract-v1")
    assert CircuitService.faithfulness(tiny_params, empty, result_pairs) == pytest.approx(0.0, abs=1e-4)


def test_full_circuit_run_equals_clean_run(tiny_params, result_pairs, full):
    from circuitlab.models.transformer import run

    pair = result_pairs[0]
    np.testing.assert_allclose(CircuitService.run_circuit(tiny_params, full, pair), run(tiny_params, pair.clean_tokens))


def test_foreign_fingerprint_is_rejected(tiny_params, result_pairs):
    with pytest.raises(CircuitError):
        CircuitService.run_circuit(tiny_params, _circuit(["a"]), result_pairs[0])


def test_cross_faithfulness(tiny_params, pair_sets, full):
    scores = CircuitService.cross_faithfulness(
        tiny_params, full, {"result": pair_sets["result"], "answer": pair_sets["answer"]}
    )
    assert scores == {"result": pytest.approx(100.0), "answer": pytest.approx(100.0)}


def test_labels_outside_the_template_are_skipped(tiny_params, result_pairs):
    foreign = Circuit(
        frozenset({Member("embed", "logits", "t2:pos3")}), tiny_params.fingerprint(), "add/abstract-v1"
    )
    assert circuit_masks(tiny_params, foreign, result_pairs[0]).all()


def test_search_reaches_band(tiny_params, result_pairs):
    table = _random_table(tiny_params)
    circuit, result = CircuitService.search_minimal_circuit(
        table, tiny_params, result_pairs, SearchConfig(k=10, n=500)
    )
    assert not result.flagged
    assert 99.0 <= result.faithfulness <= 101.0
    assert len(circuit) == result.circuit_size
    assert result.trajectory[0].size == 10
    assert circuit.provenance.error_type == "result"
    assert circuit.model_fingerprint == tiny_params.fingerprint()


def test_unreachable_band_is_flagged(tiny_params, result_pairs):
    table = _random_table(tiny_params)
    _, result = CircuitService.search_minimal_circuit(
        table, tiny_params, result_pairs, SearchConfig(k=5, n=5, band=(200.0, 300.0), max_steps=2)
    )
    assert result.flagged
    assert len(result.trajectory) == 2
    assert not any(step.in_band for step in result.trajectory)
    closest = min(result.trajectory, key=lambda step: abs(step.faithfulness - 100.0))
    assert result.faithfulness == closest.faithfulness
    assert result.circuit_size == closest.size


def test_search_rejects_other_templates(tiny_params):
    table = _random_table(tiny_params, template_id=1)
    with pytest.raises(CircuitError):
        CircuitService.search_minimal_circuit(table, tiny_params, generate_pairs(2, 2, "result", seed=0))


def test_soft_intersection_thresholds():
    circuits = [_circuit("abc"), _circuit("bcd"), _circuit("cde", template_ids=(3,))]
    names = lambda c: {m.src[-1] for m in c.members}  # noqa: E731
    assert names(CircuitService.soft_intersection(circuits, 1)) == {"c"}
    assert names(CircuitService.soft_intersection(circuits, "2/3")) == {"b", "c", "d"}
    assert names(CircuitService.soft_intersection(circuits, 0.5)) == {"b", "c", "d"}
    assert names(CircuitService.soft_intersection(circuits, Fraction(1, 3))) == set("abcde")
    merged = CircuitService.soft_intersection(circuits, "2/3")
    assert merged.provenance.tau == "2/3"
    assert merged.provenance.template_ids == [1, 3]


def test_soft_intersection_is_monotone_in_tau():
    circuits = [_circuit("abc"), _circuit("bcd"), _circuit("cde"), _circuit("ce")]
    sizes = [len(CircuitService.soft_intersection(circuits, Fraction(i, 4))) for i in range(1, 5)]
    assert sizes == sorted(sizes, reverse=True)


def _random_family(rng, k, pool=12):
    return [_circuit([int(n) for n in np.flatnonzero(rng.random(pool) < 0.5)] or [0]) for _ in range(k)]


def test_soft_intersection_extremes_on_random_families():
    rng = np.random.default_rng(11)
    for _ in range(25):
        k = int(rng.integers(2, 6))
        circuits = _random_family(rng, k)
        union = frozenset().union(*(c.members for c in circuits))
        inter = frozenset.intersection(*(c.members for c in circuits))
        assert CircuitService.soft_intersection(circuits, Fraction(1, k)).members == union
        assert CircuitService.soft_intersection(circuits, 1).members == inter


def test_soft_intersection_errors():
    with pytest.raises(CircuitError):
        CircuitService.soft_intersection([_circuit("a")], 0)
    with pytest.raises(CircuitError):
        CircuitService.soft_intersection([], "1/2")
    with pytest.raises(CircuitError):
        CircuitService.soft_intersection([_circuit("a"), _circuit("a", domain="sub/abstract-v1")], 1)
    with pytest.raises(CircuitError):
        CircuitService.soft_intersection([_circuit("a"), _circuit("a", fingerprint="0" * 64)], 1)


def test_overlap():
    result = CircuitService.overlap(_circuit("abc"), _circuit("bc"))
    assert result.iou == pytest.approx(2 / 3)
    assert result.iom == 1.0
    assert result.per_label["equals"] == {"intersection": 2, "union": 3}
    with pytest.raises(CircuitError):
        CircuitService.overlap(_circuit("a"), _circuit("a", domain="sub/abstract-v1"))
    with pytest.raises(CircuitError):
        CircuitService.overlap(_circuit("a"), _circuit(""))


def test_iou_never_exceeds_iom():
    rng = np.random.default_rng(5)
    for _ in range(50):
        a, b = _random_family(rng, 2)
        result = CircuitService.overlap(a, b)
        assert 0.0 <= result.iou <= result.iom <= 1.0


def test_set_ops():
    union = CircuitService.set_ops(_circuit("ab"), _circuit("bc"), "union")
    inter = CircuitService.set_ops(_circuit("ab"), _circuit("bc"), "intersection")
    assert len(union) == 3
    assert len(inter) == 1
    assert union.provenance.source == "union"
    with pytest.raises(CircuitError):
        CircuitService.set_ops(_circuit("ab"), _circuit("bc"), "difference")


def test_circuit_json_round_trip(full):
    again = Circuit.from_json(full.to_json())
    assert again == full
    assert again.provenance.template_ids == [1]
