# tests/test_models/test_optimizer.py - Adam and gradient clipping
import numpy as np

from circuitlab.models.optimizer import Adam, clip_global_norm


def test_first_step_moves_by_learning_rate():
    params = {"x": np.array([1.0, -1.0, 2.0])}
    Adam(lr=0.01).step(params, {"x": np.array([4.0, -0.5, 0.0])})
    np.testing.assert_allclose(params["x"], [0.99, -0.99, 2.0], atol=1e-6)


def test_converges_on_quadratic():
    params = {"x": np.array([3.0, -2.0])}
    optimizer = Adam(lr=0.05)
    for _ in range(1000):
        optimizer.step(params, {"x": 2 * params["x"]})
    assert np.abs(params["x"]).max() < 0.5


def test_clip_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_global_norm(grads, 1.0) == 5.0
    np.testing.assert_allclose(np.sqrt(grads["a"] ** 2 + grads["b"] ** 2), 1.0)
    untouched = {"a": np.array([0.3])}
    clip_global_norm(untouched, None)
    assert untouched["a"][0] == 0.3
