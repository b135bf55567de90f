import hashlib
import json
import re
import zlib
from typing import Any, Iterable, List, Tuple

import numpy as np

HEAD_PATTERN = re.compile(r"^L(\d+)H(\d+)$", re.IGNORECASE)


def seed_stream(root_seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named stream under one run-level seed"""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(root_seed), spawn_key=(key,)))


def derive_seed(root_seed: int, name: str) -> int:
    return int(seed_stream(root_seed, name).integers(0, 2**31 - 1))


def stable_hash(payload: Any, length: int = 12) -> str:
    """Short sha256 of a JSON-serialisable payload (sorted keys)"""
    text = json.dumps(payload, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:length]


def hash_arrays(named_arrays: Iterable[Tuple[str, np.ndarray]], prefix: bytes = b"") -> str:
    digest = hashlib.sha256(prefix)
    for name, array in named_arrays:
        digest.update(name.encode("utf-8"))
        digest.update(str(array.shape).encode("utf-8"))
        digest.update(np.ascontiguousarray(array, dtype=np.float64).tobytes())
    return digest.hexdigest()


def parse_heads(text: str) -> List[Tuple[int, int]]:
    """'L1H2,L0H3' -> [(1, 2), (0, 3)]"""
    heads = []
    for chunk in filter(None, (c.strip() for c in text.split(","))):
        match = HEAD_PATTERN.match(chunk)
        if not match:
            raise ValueError(f"invalid head spec {chunk!r}, expected e.g. L1H2")
        heads.append((int(match.group(1)), int(match.group(2))))
    return heads


def format_head(layer: int, head: int) -> str:
    return f"L{layer}H{head}"
