# tests/test_services/test_probe_service.py - Probe splits, residual states and layer sweeps
import numpy as np
import pytest

from circuitlab.core.errors import ProbeError
from circuitlab.schemas.config import ProbeConfig
from circuitlab.services.dataset_service import generate_pairs
from circuitlab.services.probe_service import ProbeService

POSITIONS = ["equals", "result-first"]


@pytest.fixture(scope="module")
def probe_pairs():
    return generate_pairs(1, 16, "result", seed=0)


def test_split_per_template(result_pairs):
    mixed = list(result_pairs) + generate_pairs(2, 4, "result", seed=0)
    train, test = ProbeService.split_per_template(mixed, 2, 1, seed=0)
    assert len(train) == 4
    assert len(test) == 2
    assert {p.template_id for p in test} == {1, 2}
    assert not {id(p) for p in train} & {id(p) for p in test}


def test_collect_states(tiny_params, tiny_config, result_pairs):
    states, labels = ProbeService.collect_states(tiny_params, result_pairs, [0, 2], POSITIONS)
    assert set(states) == {(0, "equals"), (0, "result-first"), (2, "equals"), (2, "result-first")}
    assert states[(2, "equals")].shape == (len(result_pairs), tiny_config.d_model)
    assert labels.tolist() == [p.variables["result"] for p in result_pairs]


def test_unknown_position(tiny_params, result_pairs):
    with pytest.raises(ProbeError):
        ProbeService.collect_states(tiny_params, result_pairs, [0], ["nowhere"])


def test_layer_sweep(tiny_params, tiny_config, probe_pairs):
    cfg = ProbeConfig(lr=0.05, epochs=5, train_per_template=12, test_per_template=4)
    grid, probes = ProbeService.probe_layer_sweep(tiny_params, probe_pairs, POSITIONS, cfg, seed=0, n_workers=2)
    assert grid.layers == list(range(tiny_config.n_layers + 1))
    assert len(grid.cells) == len(grid.layers) * len(POSITIONS)
    assert all(cell.n_train == 12 and cell.n_test == 4 for cell in grid.cells)
    assert all(0.0 <= cell.test_accuracy <= 1.0 for cell in grid.cells)
    assert probes[(1, "equals")].layer == 1
    assert grid.best_layer("equals") in grid.layers

    again, _ = ProbeService.probe_layer_sweep(tiny_params, probe_pairs, POSITIONS, cfg, seed=0, n_workers=1)
    np.testing.assert_array_equal(np.array(grid.accuracy()), np.array(again.accuracy()))


def test_layer_out_of_range(tiny_params, probe_pairs):
    with pytest.raises(ProbeError):
        ProbeService.probe_layer_sweep(tiny_params, probe_pairs, POSITIONS, ProbeConfig(layers=[5]))
