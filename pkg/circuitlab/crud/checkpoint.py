# circuitlab/crud/checkpoint.py - Model checkpoints as .npz archives
import io
import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError

from circuitlab.core.errors import CheckpointError
from circuitlab.crud.artifacts import atomic_write_bytes
from circuitlab.models.transformer import Parameters
from circuitlab.schemas.config import ModelConfig

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
META_KEY = "__meta__"


#  Save parameters plus a JSON metadata entry; arrays are stored bit-exactly
def save_checkpoint(path: Union[str, Path], params: Parameters, extra: Optional[Dict[str, Any]] = None) -> Path:
    meta = {
        "format_version": FORMAT_VERSION,
        "config": params.config.model_dump(),
        "names": params.names(),
        "fingerprint": params.fingerprint(),
        "extra": extra or {},
    }
    buffer = io.BytesIO()
    np.savez(buffer, **{META_KEY: np.array(json.dumps(meta, sort_keys=True))}, **params.arrays)
    path = atomic_write_bytes(path, buffer.getvalue())
    logger.info(f"Saved checkpoint {path} ({params.n_parameters()} parameters)")
    return path


#  Load parameters and the metadata saved with them
def load_checkpoint(path: Union[str, Path]) -> Tuple[Parameters, Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        with np.load(path, allow_pickle=False) as archive:
            meta = json.loads(str(archive[META_KEY]))
            arrays = {name: archive[name].astype(np.float64) for name in meta["names"]}
    except (KeyError, ValueError, OSError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {meta.get('format_version')}")
    try:
        config = ModelConfig(**meta["config"])
    except ValidationError as exc:
        raise CheckpointError(f"{path}: invalid model config ({exc})") from exc
    params = Parameters(config, arrays)
    if meta.get("fingerprint") and params.fingerprint() != meta["fingerprint"]:
        raise CheckpointError(f"{path}: fingerprint mismatch, file is corrupted")
    return params, meta.get("extra", {})
