# tests/test_services/test_trainer.py - Training loop, zero-step runs and seed determinism
import numpy as np
import pytest

from circuitlab.schemas.config import TrainConfig
from circuitlab.services.dataset_service import DatasetService
from circuitlab.services.trainer_service import TrainerService, TrainingData


@pytest.fixture(scope="module")
def data(pair_sets):
    computation = [DatasetService().make_computation_prompts(1, 8, seed=0)]
    return TrainingData.from_pairs(pair_sets["result"] + pair_sets["answer"], computation)


def _config(**update):
    return TrainConfig(lr=1e-2, batch_size=16, steps=60, seed=0, log_every=1000).model_copy(update=update)


def test_training_reduces_loss(tiny_params, data):
    trained, curve = TrainerService.train(tiny_params, data, _config(), progress=False)
    losses = np.array([row["loss"] for row in curve])
    assert len(losses) == 60
    assert losses[-10:].mean() < losses[:10].mean()
    assert trained.fingerprint() != tiny_params.fingerprint()
    assert {row["task"] for row in curve} <= {"validation", "computation"}


def test_zero_steps_leave_parameters_untouched(tiny_params, data):
    trained, curve = TrainerService.train(tiny_params, data, _config(steps=0), progress=False)
    assert curve == []
    assert trained.fingerprint() == tiny_params.fingerprint()
    assert trained is not tiny_params


def test_training_is_deterministic_for_a_seed(tiny_params, data):
    first, curve_a = TrainerService.train(tiny_params, data, _config(steps=10), progress=False)
    second, curve_b = TrainerService.train(tiny_params, data, _config(steps=10), progress=False)
    other, _ = TrainerService.train(tiny_params, data, _config(steps=10, seed=1), progress=False)
    assert first.fingerprint() == second.fingerprint()
    assert curve_a == curve_b
    assert other.fingerprint() != first.fingerprint()
