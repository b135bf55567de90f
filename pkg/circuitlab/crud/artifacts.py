# circuitlab/crud/artifacts.py - Atomic JSON / CSV / text artifact files
import csv
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Union

from circuitlab.core.errors import CircuitLabError
from circuitlab.schemas.circuit import AttributionTable, Circuit

PathLike = Union[str, Path]


#  Write bytes through a temp file in the target directory, then rename over the target
def atomic_write_bytes(path: PathLike, payload: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


#  JSON documents (sorted keys so reruns are byte-identical)
def write_json(path: PathLike, payload: Any) -> Path:
    return write_text(path, json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def read_json(path: PathLike) -> Any:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path} does not exist")
    with path.open("r", encoding="utf-8") as handle:
        return json.load(handle)


#  CSV tables with a fixed column order
def write_csv(path: PathLike, rows: Iterable[Dict[str, Any]], columns: Sequence[str]) -> Path:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: row.get(c) for c in columns})
    return write_text(path, buffer.getvalue())


def read_csv(path: PathLike) -> List[Dict[str, str]]:
    with Path(path).open("r", encoding="utf-8", newline="") as handle:
        return list(csv.DictReader(handle))


#  Circuits and attribution tables
def save_circuit(path: PathLike, circuit: Circuit) -> Path:
    return write_json(path, circuit.to_json())


def load_circuit(path: PathLike) -> Circuit:
    try:
        return Circuit.from_json(read_json(path))
    except (KeyError, TypeError, ValueError) as exc:
        raise CircuitLabError(f"{path}: not a circuit file ({exc})") from exc


def save_table(path: PathLike, table: AttributionTable) -> Path:
    return write_json(path, table.to_json())


def load_table(path: PathLike, edges) -> AttributionTable:
    try:
        return AttributionTable.from_json(read_json(path), edges)
    except (KeyError, TypeError, ValueError) as exc:
        raise CircuitLabError(f"{path}: not an attribution table ({exc})") from exc
