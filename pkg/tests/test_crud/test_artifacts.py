# tests/test_crud/test_artifacts.py - Artifact files, checkpoints, datasets and manifests
import io
import json

import numpy as np
import pytest

from circuitlab.core.errors import CheckpointError, CircuitLabError, DatasetError
from circuitlab.crud.artifacts import (
    load_circuit,
    load_table,
    read_csv,
    read_json,
    save_circuit,
    save_table,
    write_csv,
    write_json,
)
from circuitlab.crud.checkpoint import META_KEY, load_checkpoint, save_checkpoint
from circuitlab.crud.dataset import dataset_id, read_pairs, write_pairs
from circuitlab.crud.manifest import list_manifests, write_manifest
from circuitlab.schemas.circuit import AttributionTable
from circuitlab.schemas.report import RunManifest
from circuitlab.services.circuit_service import CircuitService
from circuitlab.services.patching_service import label_map_of


def test_json_write_is_atomic(tmp_path):
    path = write_json(tmp_path / "nested" / "doc.json", {"b": 1, "a": [1, 2]})
    assert read_json(path) == {"a": [1, 2], "b": 1}
    assert [p.name for p in path.parent.iterdir()] == ["doc.json"]
    with pytest.raises(FileNotFoundError):
        read_json(tmp_path / "missing.json")


def test_csv_round_trip(tmp_path):
    path = write_csv(tmp_path / "rows.csv", [{"a": 1, "b": "x"}, {"a": 2}], ["a", "b"])
    assert read_csv(path) == [{"a": "1", "b": "x"}, {"a": "2", "b": ""}]


def test_circuit_file_round_trip(tmp_path, tiny_params, result_pairs):
    circuit = CircuitService.full_circuit(tiny_params, label_map_of(result_pairs[0]))
    assert load_circuit(save_circuit(tmp_path / "c.json", circuit)) == circuit
    (tmp_path / "bad.json").write_text(json.dumps({"members": []}))
    with pytest.raises(CircuitLabError):
        load_circuit(tmp_path / "bad.json")


def test_table_file_round_trip(tmp_path, tiny_params, result_pairs):
    label_map = label_map_of(result_pairs[0])
    edges = tiny_params.graph.edge_texts()
    scores = np.random.default_rng(0).random((len(edges), label_map.length))
    table = AttributionTable(edges, scores, label_map.all_labels(), template_id=1)
    again = load_table(save_table(tmp_path / "t.json", table), edges)
    np.testing.assert_array_equal(again.scores, table.scores)
    with pytest.raises(CircuitLabError):
        load_table(tmp_path / "t.json", edges[:3])


def test_checkpoint_round_trip(tmp_path, tiny_params):
    path = save_checkpoint(tmp_path / "model.npz", tiny_params, extra={"step": 3})
    params, extra = load_checkpoint(path)
    assert extra == {"step": 3}
    assert params.fingerprint() == tiny_params.fingerprint()
    for name in tiny_params.names():
        np.testing.assert_array_equal(params[name], tiny_params[name])


def test_checkpoint_errors(tmp_path, tiny_params):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.npz")
    garbage = tmp_path / "garbage.npz"
    garbage.write_bytes(b"not an archive")
    with pytest.raises(CheckpointError):
        load_checkpoint(garbage)

    path = save_checkpoint(tmp_path / "model.npz", tiny_params)
    with np.load(path) as archive:
        arrays = {name: archive[name] for name in archive.files}
    arrays["unembed.W_U"] = arrays["unembed.W_U"] + 1.0
    buffer = io.BytesIO()
    np.savez(buffer, **arrays)
    tampered = tmp_path / "tampered.npz"
    tampered.write_bytes(buffer.getvalue())
    assert META_KEY in arrays
    with pytest.raises(CheckpointError):
        load_checkpoint(tampered)


def test_pairs_round_trip(tmp_path, result_pairs):
    path = write_pairs(tmp_path / "pairs.jsonl", result_pairs)
    again = read_pairs(path)
    assert [p.clean_tokens for p in again] == [p.clean_tokens for p in result_pairs]
    assert dataset_id(again) == dataset_id(result_pairs)


def test_bad_pair_line_reports_location(tmp_path, result_pairs):
    path = tmp_path / "pairs.jsonl"
    path.write_text(json.dumps(result_pairs[0].to_record()) + "\n{broken\n")
    with pytest.raises(DatasetError, match=":2:"):
        read_pairs(path)
    with pytest.raises(DatasetError):
        read_pairs(tmp_path / "missing.jsonl")


def test_manifests_are_listed_oldest_first(tmp_path):
    for command, created in (("train", "2024-01-02T00:00:00"), ("gen", "2024-01-01T00:00:00")):
        write_manifest(tmp_path, RunManifest(command=command, config_hash="abc", seed=0, created_at=created))
    assert [m.command for m in list_manifests(tmp_path)] == ["gen", "train"]
