# circuitlab/models/probe.py - Softmax-regression probes on residual-stream states
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from circuitlab.core import autodiff as ad
from circuitlab.core.errors import ProbeError
from circuitlab.models.optimizer import Adam
from circuitlab.utils.utils import seed_stream


@dataclass
class ProbeWeights:
    weight: np.ndarray  # (d_model, n_classes)
    bias: np.ndarray    # (n_classes,)
    classes: List[int]  # class index -> result value
    layer: Optional[int] = None
    position: Optional[str] = None
    train_accuracy: float = 0.0
    test_accuracy: Optional[float] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def logits(self, states: np.ndarray) -> np.ndarray:
        return np.asarray(states, dtype=np.float64) @ self.weight + self.bias

    def predict(self, states: np.ndarray) -> np.ndarray:
        """Predicted result values"""
        return np.asarray(self.classes)[self.logits(states).argmax(axis=-1)]

    def accuracy(self, states: np.ndarray, labels: np.ndarray) -> float:
        labels = np.asarray(labels)
        if not len(labels):
            return 0.0
        return float((self.predict(states) == labels).mean())

    def to_json(self) -> Dict[str, Any]:
        return {
            "layer": self.layer,
            "position": self.position,
            "classes": self.classes,
            "train_accuracy": self.train_accuracy,
            "test_accuracy": self.test_accuracy,
            "weight": self.weight.tolist(),
            "bias": self.bias.tolist(),
            "metadata": self.metadata,
        }


def _loss(weight, bias, states: np.ndarray, targets: np.ndarray) -> ad.Tensor:
    logits = ad.add(ad.matmul(states, weight), bias)
    picked = ad.gather(ad.log_softmax(logits), targets[:, None])
    return ad.mul(ad.sum_(picked), -1.0 / len(targets))


def train_probe(
    hidden_states: np.ndarray,
    class_labels: np.ndarray,
    lr: float = 1e-3,
    epochs: int = 1,
    seed: int = 0,
    batch_size: Optional[int] = None,
) -> ProbeWeights:
    """
    Multinomial logistic regression trained with Adam from a zero initialisation.
    `batch_size=None` trains full batch, one step per epoch.
    """
    states = np.asarray(hidden_states, dtype=np.float64)
    labels = np.asarray(class_labels)
    if states.ndim != 2 or len(states) != len(labels):
        raise ProbeError(f"expected (n, d) states and n labels, got {states.shape} and {labels.shape}")
    classes = sorted({int(v) for v in labels})
    if len(classes) < 2:
        raise ProbeError(f"probe needs at least two classes, got {classes}")
    lookup = {value: index for index, value in enumerate(classes)}
    targets = np.array([lookup[int(v)] for v in labels], dtype=np.int64)

    arrays = {
        "weight": np.zeros((states.shape[1], len(classes))),
        "bias": np.zeros(len(classes)),
    }
    optimizer = Adam(lr=lr)
    rng = seed_stream(seed, "probe/shuffle")
    size = batch_size or len(states)
    for _ in range(epochs):
        order = rng.permutation(len(states))
        for start in range(0, len(order), size):
            index = order[start:start + size]
            tape = ad.Tape()
            weight = tape.leaf(arrays["weight"], "weight")
            bias = tape.leaf(arrays["bias"], "bias")
            loss = _loss(weight, bias, states[index], targets[index])
            grads = ad.backward(tape, np.ones(1), [weight.id, bias.id], output=loss)
            optimizer.step(arrays, {"weight": grads[weight.id], "bias": grads[bias.id]})

    probe = ProbeWeights(arrays["weight"], arrays["bias"], classes)
    probe.train_accuracy = probe.accuracy(states, labels)
    return probe
