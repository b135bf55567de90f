# circuitlab/crud/dataset.py - JSONL prompt-pair datasets
import json
from pathlib import Path
from typing import List, Sequence, Union

from pydantic import ValidationError

from circuitlab.core.errors import DatasetError
from circuitlab.crud.artifacts import write_text
from circuitlab.schemas.dataset import PromptPair
from circuitlab.utils.utils import stable_hash


#  One pair per line
def write_pairs(path: Union[str, Path], pairs: Sequence[PromptPair]) -> Path:
    lines = [json.dumps(p.to_record(), sort_keys=True) for p in pairs]
    return write_text(path, "\n".join(lines) + ("\n" if lines else ""))


def read_pairs(path: Union[str, Path]) -> List[PromptPair]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset {path} does not exist")
    pairs = []
    with path.open("r", encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                pairs.append(PromptPair.from_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValidationError) as exc:
                raise DatasetError(f"{path}:{number}: invalid pair record ({exc})") from exc
    return pairs


#  Content id used in manifests
def dataset_id(pairs: Sequence[PromptPair]) -> str:
    return stable_hash([p.to_record() for p in pairs])
