# tests/test_services/test_dataset.py - Prompt pairs, label maps and splits
import numpy as np
import pytest

from circuitlab.core.errors import DatasetError
from circuitlab.schemas.dataset import POSITION_LABELS
from circuitlab.services.dataset_service import (
    DatasetService,
    generate_pairs,
    label_positions,
    make_computation_pairs,
)
from circuitlab.services.template_config import TemplateConfig


@pytest.mark.parametrize("template_id", range(1, 9))
def test_every_add_template_has_all_labels(template_id):
    label_map = label_positions(template_id)
    assert set(label_map.labels) == set(POSITION_LABELS)
    labels = label_map.labels
    assert labels["bos"] == 0
    assert labels["final"] == label_map.length - 1
    assert labels["result-second"] == labels["result-first"] + 1 == labels["equals"] + 2
    assert labels["answer-first"] > labels["result-second"]


@pytest.mark.parametrize("operation", ["sub", "mul", "div"])
def test_other_operations_render(operation):
    pairs = generate_pairs(2, 3, "result", seed=0, operation=operation)
    assert len(pairs) == 3
    assert all(p.operation.value == operation for p in pairs)


def test_error_type_decides_differing_positions(pair_sets):
    expected = {
        "result": {"result-first", "result-second"},
        "answer": {"answer-first", "answer-second"},
        "both": {"result-first", "result-second", "answer-first", "answer-second"},
    }
    for error_type, pairs in pair_sets.items():
        for pair in pairs:
            positions = {p: label for label, p in pair.position_labels.items()}
            differing = {
                positions.get(i, i) for i, (a, b) in enumerate(zip(pair.clean_tokens, pair.corrupt_tokens)) if a != b
            }
            assert differing <= expected[error_type]
            assert differing & expected[error_type]


def test_pairs_share_variables_across_error_types(pair_sets):
    corrupt = {e: [p.corrupt_tokens for p in pairs] for e, pairs in pair_sets.items()}
    assert corrupt["result"] == corrupt["answer"] == corrupt["both"]


def test_values_and_labels(pair_sets, tokenizer):
    for pair in pair_sets["both"]:
        variables = pair.variables
        assert 10 <= variables["result"] <= 18
        assert 10 <= variables["wrong"] <= 19
        assert variables["wrong"] != variables["result"]
        assert variables["num1"] + variables["num2"] == variables["result"]
        assert pair.clean_labels == [tokenizer.invalid_id]
        assert pair.corrupt_labels == [tokenizer.valid_id]


def test_generation_is_deterministic():
    first = generate_pairs(3, 5, "answer", seed=11)
    second = generate_pairs(3, 5, "answer", seed=11)
    assert [p.clean_tokens for p in first] == [p.clean_tokens for p in second]


def test_invalid_requests():
    with pytest.raises(DatasetError):
        generate_pairs(1, 0, "result", seed=0)
    with pytest.raises(DatasetError):
        label_positions(9)
    with pytest.raises(ValueError):
        generate_pairs(1, 2, "sideways", seed=0)


def test_add_error_values_span_ten_to_nineteen():
    pairs = generate_pairs(1, 2000, "result", seed=0)
    wrong = {p.variables["wrong"] for p in pairs}
    assert wrong == set(range(10, 20))
    assert all(p.variables["wrong"] != p.variables["result"] for p in pairs)


@pytest.mark.parametrize("operation", ["sub", "mul", "div"])
def test_error_values_stay_two_digit(operation):
    lo, hi = TemplateConfig.error_range(operation)
    assert (lo, hi) == TemplateConfig.result_range(operation)
    assert lo >= 10 and hi <= 99
    for pair in generate_pairs(3, 50, "answer", seed=1, operation=operation):
        assert lo <= pair.variables["wrong"] <= hi
        assert pair.variables["wrong"] != pair.variables["result"]


def test_result_prefix():
    assert TemplateConfig.error_range("add") == (10, 19)
    assert TemplateConfig.result_prefix("add") == "1"
    for operation in ("sub", "mul", "div"):
        assert TemplateConfig.result_prefix(operation) == ""


def test_add_computation_pairs_cut_after_shared_digit(result_pairs, tokenizer):
    pairs = make_computation_pairs(result_pairs, seed=0)
    assert len(pairs) == len(result_pairs)
    for pair in pairs:
        true, corrupt = pair.variables["result"], pair.variables["corrupt_result"]
        assert pair.task == "computation"
        assert pair.clean_tokens[-2] == pair.corrupt_tokens[-2] == tokenizer.token_id("=")
        assert pair.clean_tokens[-1] == pair.corrupt_tokens[-1] == tokenizer.digit_id("1")
        assert true != corrupt and 10 <= corrupt <= 18
        assert pair.clean_labels == [tokenizer.digit_id(str(true)[1])]
        assert pair.corrupt_labels == [tokenizer.digit_id(str(corrupt)[1])]
        assert pair.position_labels["result-first"] == len(pair.clean_tokens) - 1


def test_mul_computation_pairs_cut_at_equals(tokenizer):
    pairs = make_computation_pairs(generate_pairs(1, 6, "result", seed=0, operation="mul"), seed=0)
    for pair in pairs:
        true, corrupt = pair.variables["result"], pair.variables["corrupt_result"]
        assert pair.clean_tokens[-1] == tokenizer.token_id("=")
        assert len(str(corrupt)) == len(str(true)) == 2
        assert str(corrupt)[0] != str(true)[0]
        assert pair.clean_labels == [tokenizer.digit_id(str(true)[0])]
        assert "result-first" not in pair.position_labels


def test_computation_prompts_cut_after_first_digit():
    service = DatasetService()
    batch = service.make_computation_prompts(1, 6, seed=0)
    assert batch.tokens.shape == (6, batch.equals + 2)
    assert np.all(batch.targets[:, 0] >= 3)


def test_split_is_deterministic_and_disjoint(result_pairs):
    service = DatasetService()
    train, held = service.split_pairs(result_pairs, 0.5, seed=0)
    again, _ = service.split_pairs(result_pairs, 0.5, seed=0)
    assert len(train) + len(held) == len(result_pairs)
    assert [p.clean_tokens for p in train] == [p.clean_tokens for p in again]
    with pytest.raises(DatasetError):
        service.split_pairs(result_pairs, 1.0, seed=0)
