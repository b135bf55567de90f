# tests/test_services/test_patching.py - Exact patching oracle and edge attribution patching
import numpy as np
import pytest

from circuitlab.core.errors import MetricError, PatchError
from circuitlab.schemas.dataset import MetricSpec
from circuitlab.services.dataset_service import generate_pairs
from circuitlab.services.patching_service import PairMetric, PatchingService, logit_diff


def _instances(table, count=40):
    return [(e, p) for e, p, _ in table.ranked()[:count]] + [(0, 0), (len(table.edges) - 1, 3)]


def test_eap_matches_exact_patching_on_linear_model(linear_params, result_pairs):
    """Linear surrogate: first-order attribution is exact"""
    table = PatchingService.eap_scores(linear_params, result_pairs)
    instances = _instances(table)
    effects = PatchingService.exact_patch_sweep(linear_params, result_pairs, instances)
    exact = np.abs(effects).mean(axis=1)
    eap = np.array([table.scores[e, p] for e, p in instances])
    np.testing.assert_allclose(eap, exact, rtol=1e-6, atol=1e-9)


@pytest.mark.parametrize("template_id,error_type,seed", [(1, "result", 1), (2, "answer", 2), (2, "result", 3)])
def test_eap_matches_exact_patching_on_every_instance(linear_params, template_id, error_type, seed):
    pairs = generate_pairs(template_id, 3, error_type, seed=seed)
    table = PatchingService.eap_scores(linear_params, pairs)
    instances = [(e, p) for e in range(len(table.edges)) for p in range(table.scores.shape[1])]
    effects = PatchingService.exact_patch_sweep(linear_params, pairs, instances)
    eap = np.array([table.scores[e, p] for e, p in instances])
    np.testing.assert_allclose(eap, np.abs(effects).mean(axis=1), rtol=1e-6, atol=1e-9)


def test_eap_scores_scale_with_metric(tiny_params, result_pairs):
    base = MetricSpec.for_pair(result_pairs[0])
    unit = PatchingService.eap_scores(tiny_params, result_pairs, base)
    scaled = PatchingService.eap_scores(tiny_params, result_pairs, base.model_copy(update={"scale": 2.5}))
    np.testing.assert_allclose(scaled.scores, 2.5 * unit.scores, rtol=1e-9, atol=1e-12)
    assert scaled.metadata["metric_scale"] == 2.5


def test_spearman_is_one_on_linear_model(linear_params, result_pairs):
    table = PatchingService.eap_scores(linear_params, result_pairs)
    rho, eap, exact = PatchingService.spearman_agreement(linear_params, table, result_pairs, top_k=15)
    assert len(eap) == len(exact) == 15
    assert rho > 0.99


def test_mean_then_abs_is_bounded_by_abs_then_mean(tiny_params, result_pairs):
    per_pair = PatchingService.eap_scores(tiny_params, result_pairs, abs_per_pair=True)
    averaged = PatchingService.eap_scores(tiny_params, result_pairs, abs_per_pair=False)
    assert np.all(averaged.scores <= per_pair.scores + 1e-12)
    assert averaged.metadata["abs_per_pair"] is False


def test_table_layout(tiny_params, result_pairs):
    table = PatchingService.eap_scores(tiny_params, result_pairs, chunk_size=3)
    assert table.scores.shape == (len(tiny_params.graph), result_pairs[0].length)
    assert table.template_id == 1
    assert "equals" in table.position_labels
    assert table.metadata["model_fingerprint"] == tiny_params.fingerprint()
    assert table.metadata["n_pairs"] == len(result_pairs)
    ranked = table.ranked()
    assert ranked[0][2] == table.scores.max()


def test_chunking_does_not_change_scores(tiny_params, result_pairs):
    whole = PatchingService.eap_scores(tiny_params, result_pairs)
    chunked = PatchingService.eap_scores(tiny_params, result_pairs, chunk_size=1)
    np.testing.assert_allclose(chunked.scores, whole.scores, rtol=1e-9, atol=1e-12)


def test_single_edge_effect_agrees_with_sweep(tiny_params, result_pairs):
    pair = result_pairs[0]
    edge = ("embed", "logits")
    position = pair.length - 1
    effect = PatchingService.exact_patch_effect(tiny_params, pair, edge, position)
    index = tiny_params.graph.edge_index(*edge)
    sweep = PatchingService.exact_patch_sweep(tiny_params, [pair], [(index, position)])
    assert effect == pytest.approx(sweep[0, 0])


def test_mixed_templates_are_rejected(tiny_params, result_pairs):
    other = generate_pairs(2, 1, "result", seed=0)
    with pytest.raises(PatchError):
        PatchingService.eap_scores(tiny_params, list(result_pairs) + other)
    with pytest.raises(PatchError):
        PatchingService.exact_patch_sweep(tiny_params, [], [(0, 0)])


def test_logit_diff_metric(tokenizer):
    logits = np.zeros((2, 3, len(tokenizer)))
    logits[:, -1, tokenizer.invalid_id] = 2.0
    logits[:, -1, tokenizer.valid_id] = 0.5
    spec = MetricSpec(clean_token_ids=[tokenizer.invalid_id], corrupt_token_ids=[tokenizer.valid_id])
    assert logit_diff(logits, spec) == pytest.approx(1.5)
    averaged = MetricSpec(clean_token_ids=[tokenizer.invalid_id, 3], corrupt_token_ids=[tokenizer.valid_id])
    assert logit_diff(logits, averaged) == pytest.approx(0.5)
    with pytest.raises(MetricError):
        logit_diff(logits, MetricSpec(clean_token_ids=[1], corrupt_token_ids=[2], position=5))
    with pytest.raises(ValueError):
        MetricSpec(clean_token_ids=[1], corrupt_token_ids=[1])


def test_pair_metric_values(result_pairs, tokenizer):
    metric = PairMetric.for_pairs(result_pairs)
    logits = np.zeros((len(result_pairs), result_pairs[0].length, len(tokenizer)))
    logits[:, -1, tokenizer.invalid_id] = 1.0
    np.testing.assert_allclose(metric.values(logits), 1.0)
