# circuitlab/crud/manifest.py - Run manifests
from pathlib import Path
from typing import List, Union

from pydantic import ValidationError

from circuitlab.core.errors import CircuitLabError
from circuitlab.crud.artifacts import read_json, write_json
from circuitlab.schemas.report import RunManifest
from circuitlab.utils.utils import stable_hash


def manifest_path(run_dir: Union[str, Path], manifest: RunManifest) -> Path:
    key = stable_hash({"command": manifest.command, "outputs": manifest.outputs, "config": manifest.config_hash})
    return Path(run_dir) / f"manifest-{manifest.command}-{key}.json"


#  Write a manifest next to the artifacts it describes
def write_manifest(run_dir: Union[str, Path], manifest: RunManifest) -> Path:
    return write_json(manifest_path(run_dir, manifest), manifest.model_dump())


def read_manifest(path: Union[str, Path]) -> RunManifest:
    try:
        return RunManifest(**read_json(path))
    except ValidationError as exc:
        raise CircuitLabError(f"{path}: invalid manifest ({exc})") from exc


#  Every manifest in a run directory, oldest first
def list_manifests(run_dir: Union[str, Path]) -> List[RunManifest]:
    manifests = [read_manifest(p) for p in sorted(Path(run_dir).glob("manifest-*.json"))]
    return sorted(manifests, key=lambda m: m.created_at)
