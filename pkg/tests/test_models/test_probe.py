# tests/test_models/test_probe.py - Softmax-regression probe training
import numpy as np
import pytest

from circuitlab.core.errors import ProbeError
from circuitlab.models.probe import train_probe


def _blobs(n=60, seed=0):
    rng = np.random.default_rng(seed)
    centers = {11: np.array([3.0, 0.0, 0.0]), 14: np.array([-3.0, 0.0, 0.0]), 17: np.array([0.0, 3.0, 0.0])}
    labels = np.repeat(list(centers), n // 3)
    states = np.stack([centers[int(v)] for v in labels]) + rng.normal(0.0, 0.5, (len(labels), 3))
    return states, labels


def test_separable_classes_are_learned():
    states, labels = _blobs()
    probe = train_probe(states, labels, lr=0.1, epochs=200)
    assert probe.classes == [11, 14, 17]
    assert probe.train_accuracy > 0.9
    assert set(probe.predict(states)) <= {11, 14, 17}


def test_minibatches_are_deterministic():
    states, labels = _blobs()
    first = train_probe(states, labels, lr=0.05, epochs=5, seed=3, batch_size=16)
    second = train_probe(states, labels, lr=0.05, epochs=5, seed=3, batch_size=16)
    np.testing.assert_array_equal(first.weight, second.weight)


def test_bad_inputs():
    states, labels = _blobs()
    with pytest.raises(ProbeError):
        train_probe(states, np.full(len(states), 12))
    with pytest.raises(ProbeError):
        train_probe(states[:, 0], labels)
    with pytest.raises(ProbeError):
        train_probe(states, labels[:-1])
