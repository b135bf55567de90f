# circuitlab/core/cache.py - Activation cache of one (batched) model run
import logging
from typing import Dict, Iterator, List, Optional

import numpy as np

from circuitlab.core.errors import GraphError

logger = logging.getLogger(__name__)


class ActivationCache:
    """
    Hook name -> activation array with a leading batch axis.

    Per-head hooks (q_in, k_in, v_in, head_out) are (batch, head, seq, d_model), attention
    patterns (batch, head, seq, seq), everything else (batch, seq, d_model).
    """

    def __init__(self, activations: Optional[Dict[str, np.ndarray]] = None):
        self._store: Dict[str, np.ndarray] = {}
        for name, value in (activations or {}).items():
            self[name] = value

    def __setitem__(self, name: str, value: np.ndarray):
        array = np.array(value, dtype=np.float64)
        array.flags.writeable = False
        self._store[name] = array

    def __getitem__(self, name: str) -> np.ndarray:
        if name not in self._store:
            raise KeyError(f"hook {name!r} not in cache")
        return self._store[name]

    def __contains__(self, name: str) -> bool:
        return name in self._store

    def __iter__(self) -> Iterator[str]:
        return iter(self._store)

    def __len__(self) -> int:
        return len(self._store)

    def names(self) -> List[str]:
        return list(self._store)

    @property
    def batch_size(self) -> int:
        return self["embed"].shape[0]

    @property
    def seq_len(self) -> int:
        return self["embed"].shape[1]

    # Node accessors

    def node(self, node) -> np.ndarray:
        """Output of a source node or input of a destination node, (batch, seq, d_model)"""
        name, head = node.hook
        if name not in self._store:
            raise GraphError(f"no activation cached for {node.text} (hook {name})")
        array = self._store[name]
        return array if head is None else array[:, head]

    def at(self, node, position: int) -> np.ndarray:
        """(batch, d_model) activation of `node` at one token position"""
        array = self.node(node)
        if not -array.shape[1] <= position < array.shape[1]:
            raise GraphError(f"position {position} outside sequence of length {array.shape[1]}")
        return array[:, position]

    def residual(self, layer: int, n_layers: int) -> np.ndarray:
        """Residual stream entering layer `layer`; `n_layers` selects the final stream"""
        if not 0 <= layer <= n_layers:
            raise GraphError(f"residual layer {layer} outside 0..{n_layers}")
        if layer == n_layers:
            return self["resid_final"]
        return self[f"blocks.{layer}.resid_pre"]

    def pattern(self, layer: int, head: int) -> np.ndarray:
        return self[f"blocks.{layer}.pattern"][:, head]

    def incoming_sum(self, graph, dst) -> np.ndarray:
        """Sum of the cached outputs of every source with an edge into `dst`"""
        return sum(self.node(src) for src in graph.incoming(dst))

    def select(self, index) -> "ActivationCache":
        """Cache restricted to a subset of the batch"""
        return ActivationCache({name: value[index] for name, value in self._store.items()})
