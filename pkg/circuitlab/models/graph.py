# circuitlab/models/graph.py - Node/edge structure of the toy transformer's residual stream
import re
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import networkx as nx

from circuitlab.core.errors import GraphError

EMBED = "embed"
ATTN_Q = "attn-Q"
ATTN_K = "attn-K"
ATTN_V = "attn-V"
ATTN_O = "attn-O"
MLP_IN = "mlp-in"
MLP_OUT = "mlp-out"
RESID_FINAL = "resid-final"

ATTN_INPUTS = (ATTN_Q, ATTN_K, ATTN_V)
SOURCE_KINDS = (EMBED, ATTN_O, MLP_OUT)
_INPUT_HOOKS = {ATTN_Q: "q_in", ATTN_K: "k_in", ATTN_V: "v_in"}

_HEAD_TEXT = re.compile(r"^A\.(\d+)\.(\d+)\.([QKVO])$")
_MLP_TEXT = re.compile(r"^MLP (in|out) (\d+)$")


@dataclass(frozen=True, order=True)
class NodeId:
    kind: str
    layer: int = -1
    head: int = -1

    @property
    def text(self) -> str:
        if self.kind == EMBED:
            return "embed"
        if self.kind == RESID_FINAL:
            return "logits"
        if self.kind in (MLP_IN, MLP_OUT):
            return f"MLP {self.kind[4:]} {self.layer}"
        return f"A.{self.layer}.{self.head}.{self.kind[-1]}"

    @property
    def is_source(self) -> bool:
        return self.kind in SOURCE_KINDS

    @property
    def hook(self) -> Tuple[str, Optional[int]]:
        """(hook name, head slot) holding this node's output (sources) or input (destinations)"""
        if self.kind == EMBED:
            return "embed", None
        if self.kind == RESID_FINAL:
            return "final_in", None
        if self.kind == ATTN_O:
            return f"blocks.{self.layer}.head_out", self.head
        if self.kind in ATTN_INPUTS:
            return f"blocks.{self.layer}.{_INPUT_HOOKS[self.kind]}", self.head
        if self.kind == MLP_IN:
            return f"blocks.{self.layer}.mlp_in", None
        return f"blocks.{self.layer}.mlp_out", None

    @classmethod
    def parse(cls, text: str) -> "NodeId":
        if text == "embed":
            return cls(EMBED)
        if text == "logits":
            return cls(RESID_FINAL)
        match = _HEAD_TEXT.match(text)
        if match:
            kind = {"Q": ATTN_Q, "K": ATTN_K, "V": ATTN_V, "O": ATTN_O}[match.group(3)]
            return cls(kind, int(match.group(1)), int(match.group(2)))
        match = _MLP_TEXT.match(text)
        if match:
            return cls(MLP_IN if match.group(1) == "in" else MLP_OUT, int(match.group(2)))
        raise GraphError(f"unrecognised node {text!r}")

    def __str__(self):
        return self.text


Edge = Tuple[NodeId, NodeId]


class ComputationGraph:
    """
    Edges of the residual stream. Attention inputs of layer l read from embed and every
    head/MLP below l, MLP-in of layer l also reads the heads of layer l, and the logits
    read from every source.
    """

    def __init__(self, n_layers: int, n_heads: int):
        if n_layers < 1 or n_heads < 1:
            raise GraphError(f"graph needs at least one layer and head, got {n_layers}x{n_heads}")
        self.n_layers = n_layers
        self.n_heads = n_heads

        self.sources: List[NodeId] = [NodeId(EMBED)]
        self.destinations: List[NodeId] = []
        for layer in range(n_layers):
            self.sources.extend(NodeId(ATTN_O, layer, h) for h in range(n_heads))
            self.sources.append(NodeId(MLP_OUT, layer))
            for h in range(n_heads):
                self.destinations.extend(NodeId(kind, layer, h) for kind in ATTN_INPUTS)
            self.destinations.append(NodeId(MLP_IN, layer))
        self.destinations.append(NodeId(RESID_FINAL))
        self.nodes: List[NodeId] = self.sources + self.destinations

        self._incoming: Dict[NodeId, List[NodeId]] = {d: self._sources_into(d) for d in self.destinations}
        self.edges: List[Edge] = [(s, d) for d in self.destinations for s in self._incoming[d]]
        self._edge_index: Dict[Tuple[str, str], int] = {
            (s.text, d.text): i for i, (s, d) in enumerate(self.edges)
        }

    @classmethod
    def from_config(cls, config) -> "ComputationGraph":
        return cls(config.n_layers, config.n_heads)

    def _sources_into(self, dst: NodeId) -> List[NodeId]:
        if dst.kind == RESID_FINAL:
            return list(self.sources)
        below = [
            s for s in self.sources
            if s.kind == EMBED or s.layer < dst.layer
        ]
        if dst.kind == MLP_IN:
            below.extend(NodeId(ATTN_O, dst.layer, h) for h in range(self.n_heads))
        return below

    # Lookup helpers

    def incoming(self, dst: NodeId) -> List[NodeId]:
        if dst not in self._incoming:
            raise GraphError(f"{dst.text} is not a destination node of this graph")
        return self._incoming[dst]

    def edge_index(self, src: str, dst: str) -> int:
        key = (str(src), str(dst))
        if key not in self._edge_index:
            raise GraphError(f"unknown edge {key[0]}->{key[1]}")
        return self._edge_index[key]

    def edge_texts(self) -> List[Tuple[str, str]]:
        return [(s.text, d.text) for s, d in self.edges]

    def check_node(self, node: NodeId):
        if node.kind in (EMBED, RESID_FINAL):
            return
        if not 0 <= node.layer < self.n_layers:
            raise GraphError(f"layer {node.layer} out of range for {self.n_layers} layers")
        if node.kind in ATTN_INPUTS + (ATTN_O,) and not 0 <= node.head < self.n_heads:
            raise GraphError(f"head {node.head} out of range for {self.n_heads} heads")

    def heads(self) -> List[Tuple[int, int]]:
        return [(l, h) for l in range(self.n_layers) for h in range(self.n_heads)]

    def __len__(self) -> int:
        return len(self.edges)

    def to_networkx(self) -> nx.DiGraph:
        graph = nx.DiGraph()
        graph.add_nodes_from(n.text for n in self.nodes)
        graph.add_edges_from((s.text, d.text) for s, d in self.edges)
        # Internal (non-residual) wiring: inputs of a block feed its own outputs
        for layer in range(self.n_layers):
            for h in range(self.n_heads):
                for kind in ATTN_INPUTS:
                    graph.add_edge(NodeId(kind, layer, h).text, NodeId(ATTN_O, layer, h).text)
            graph.add_edge(NodeId(MLP_IN, layer).text, NodeId(MLP_OUT, layer).text)
        return graph

    def is_acyclic(self) -> bool:
        return nx.is_directed_acyclic_graph(self.to_networkx())
