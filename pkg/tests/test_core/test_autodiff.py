# tests/test_core/test_autodiff.py - Tape, primitives and finite-difference agreement
import numpy as np
import pytest

from circuitlab.core import autodiff as ad
from circuitlab.core.errors import ConfigError, NonFiniteError, ShapeError, TapeError

TOLERANCE = 1e-4
STEP = 1e-5


def _rng():
    return np.random.default_rng(7)


def test_dense_chain_matches_finite_differences():
    """Test 1: matmul -> rms_norm -> gelu -> log_softmax -> gather"""
    rng = _rng()
    picked = np.array([[0], [2], [4]])

    def program(t):
        h = ad.gelu(ad.rms_norm(ad.matmul(t["x"], t["w"])))
        return {"metric": ad.sum_(ad.gather(ad.log_softmax(h), picked))}

    point = {"x": rng.normal(size=(3, 4)), "w": rng.normal(size=(4, 5))}
    assert ad.finite_difference_check(program, point, STEP) < TOLERANCE


def test_masked_softmax_matches_finite_differences():
    rng = _rng()
    mask = np.triu(np.ones((4, 4), dtype=bool), k=1)
    weights = rng.normal(size=(2, 4, 4))

    def program(t):
        return {"metric": ad.sum_(ad.mul(ad.softmax(t["x"], mask), weights))}

    assert ad.finite_difference_check(program, {"x": rng.normal(size=(2, 4, 4))}, STEP) < TOLERANCE


def test_shape_primitives_match_finite_differences():
    rng = _rng()
    weights = rng.normal(size=(3, 4))

    def program(t):
        x = t["x"]
        joined = ad.concat([ad.slice_(x, 1, 0, 2), ad.slice_(x, 1, 2, 4)], axis=1)
        moved = ad.transpose(ad.reshape(joined, (4, 3)), (1, 0))
        return {"metric": ad.sum_(ad.mul(moved, weights))}

    assert ad.finite_difference_check(program, {"x": rng.normal(size=(3, 4))}, STEP) < TOLERANCE


def test_embedding_and_broadcast_add_match_finite_differences():
    rng = _rng()
    ids = np.array([[0, 2, 2], [1, 0, 3]])
    weights = rng.normal(size=(2, 3, 5))

    def program(t):
        e = ad.add(ad.embedding(t["table"], ids), t["bias"])
        return {"metric": ad.sum_(ad.mul(e, weights))}

    point = {"table": rng.normal(size=(4, 5)), "bias": rng.normal(size=(5,))}
    assert ad.finite_difference_check(program, point, STEP) < TOLERANCE


def test_product_rule():
    tape = ad.Tape()
    a = tape.leaf([1.0, 2.0, 3.0])
    b = tape.leaf([4.0, 5.0, 6.0])
    out = ad.sum_(ad.mul(a, b))
    grads = ad.backward(tape, np.ones(1), [a.id, b.id], output=out)
    np.testing.assert_array_equal(grads[a.id], b.data)
    np.testing.assert_array_equal(grads[b.id], a.data)


def test_unused_input_gets_zero_gradient():
    tape = ad.Tape()
    a = tape.leaf([1.0, 2.0])
    unused = tape.leaf([[3.0, 4.0]])
    out = ad.sum_(ad.mul(a, a))
    grads = ad.backward(tape, np.ones(1), [a.id, unused.id], output=out)
    np.testing.assert_array_equal(grads[unused.id], np.zeros((1, 2)))
    np.testing.assert_array_equal(grads[a.id], [2.0, 4.0])


def test_hook_exposes_intermediate_gradient():
    tape = ad.Tape()
    x = tape.leaf([1.0, -2.0])
    h = ad.hook(ad.mul(x, 3.0), "mid")
    out = ad.sum_(ad.mul(h, h))
    grads = ad.backward(tape, np.ones(1), [h.id], output=out)
    np.testing.assert_allclose(grads[h.id], 2 * h.data)


def test_non_finite_values_are_rejected():
    with pytest.raises(NonFiniteError):
        ad.Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        ad.mul(ad.Tensor([1e308]), 1e10)


def test_tensors_are_read_only():
    tensor = ad.Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        tensor.data[0] = 5.0


def test_operands_from_two_tapes_raise():
    a = ad.Tape().leaf([1.0])
    b = ad.Tape().leaf([2.0])
    with pytest.raises(TapeError):
        ad.add(a, b)


def test_backward_rejects_foreign_ids_and_bad_seeds():
    tape = ad.Tape()
    a = tape.leaf([1.0, 2.0])
    out = ad.mul(a, 2.0)
    with pytest.raises(TapeError):
        ad.backward(tape, np.ones(2), [999], output=out)
    with pytest.raises(ShapeError):
        ad.backward(tape, np.ones(3), [a.id], output=out)


def test_shape_mismatches_raise():
    with pytest.raises(ShapeError):
        ad.matmul(np.ones((2, 3)), np.ones((4, 5)))
    with pytest.raises(ShapeError):
        ad.add(np.ones((2, 3)), np.ones((2, 2)))
    with pytest.raises(ShapeError):
        ad.slice_(np.ones((2, 3)), 1, 2, 5)


def test_finite_difference_step_must_be_positive():
    with pytest.raises(ConfigError):
        ad.finite_difference_check(lambda t: {"metric": ad.sum_(t["x"])}, {"x": np.ones(2)}, 0.0)


def test_evaluate_records_nothing():
    outputs = ad.evaluate(lambda t: {"y": ad.mul(t["x"], 2.0)}, {"x": [1.0, 2.0]})
    np.testing.assert_array_equal(outputs["y"], [2.0, 4.0])
