# circuitlab/models/transformer.py - Pre-norm decoder-only transformer with per-node hook points
"""
Every forward pass goes through `_forward`, which assembles each destination node's input
from the residual stream and applies the interventions of a `RunPlan`:

* edge patches: dst_input = natural input + sum over patched edges of (replacement - current
  source output), masked to the patched positions;
* head-pattern patches: pattern' = pattern * keep + alpha * source_pattern (no re-normalisation);
* residual additions at `blocks.{l}.resid_pre` (or the final stream for l = n_layers).

Intervention deltas are constants, so gradients are only meaningful for unpatched runs.
"""

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from circuitlab.core import autodiff as ad
from circuitlab.core.autodiff import Tensor
from circuitlab.core.cache import ActivationCache
from circuitlab.core.errors import GraphError, PatchError, ShapeError
from circuitlab.core.monitoring import monitoring
from circuitlab.models.graph import (
    ATTN_K,
    ATTN_O,
    ATTN_Q,
    ATTN_V,
    EMBED,
    MLP_IN,
    MLP_OUT,
    RESID_FINAL,
    ComputationGraph,
    NodeId,
)
from circuitlab.schemas.config import ModelConfig
from circuitlab.utils.utils import hash_arrays, seed_stream

logger = logging.getLogger(__name__)

Operand = Union[Tensor, np.ndarray]
EdgeLike = Tuple[Union[NodeId, str], Union[NodeId, str]]


@dataclass
class Parameters:
    config: ModelConfig
    arrays: Dict[str, np.ndarray]
    _graph: Optional[ComputationGraph] = field(default=None, repr=False, compare=False)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def names(self) -> List[str]:
        return sorted(self.arrays)

    @property
    def graph(self) -> ComputationGraph:
        if self._graph is None:
            self._graph = ComputationGraph.from_config(self.config)
        return self._graph

    def fingerprint(self) -> str:
        """SHA-256 over the canonical config JSON and every array in name order"""
        config_json = json.dumps(self.config.model_dump(), sort_keys=True).encode("utf-8")
        return hash_arrays(((n, self.arrays[n]) for n in self.names()), prefix=config_json)

    def copy(self) -> "Parameters":
        return Parameters(self.config, {n: a.copy() for n, a in self.arrays.items()})

    def n_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))


def init_model(config: ModelConfig) -> Parameters:
    """Scaled normal init, deterministic under config.seed"""
    if config.vocab_size is None:
        raise ShapeError("ModelConfig.vocab_size must be set before init (use the tokenizer size)")
    if config.n_heads * config.d_head != config.d_model:
        raise ShapeError("inconsistent dims: n_heads * d_head != d_model")
    rng = seed_stream(config.seed, "init")
    std = config.init_std
    out_std = std / np.sqrt(2 * config.n_layers)
    d, h, dh, m, v = config.d_model, config.n_heads, config.d_head, config.d_mlp, config.vocab_size

    arrays: Dict[str, np.ndarray] = {
        "embed.W_E": rng.normal(0.0, std, (v, d)),
        "embed.W_pos": rng.normal(0.0, std, (config.max_seq_len, d)),
    }
    for layer in range(config.n_layers):
        prefix = f"blocks.{layer}"
        arrays[f"{prefix}.ln1.w"] = np.ones(d)
        arrays[f"{prefix}.attn.W_Q"] = rng.normal(0.0, std, (h, d, dh))
        arrays[f"{prefix}.attn.W_K"] = rng.normal(0.0, std, (h, d, dh))
        arrays[f"{prefix}.attn.W_V"] = rng.normal(0.0, std, (h, d, dh))
        arrays[f"{prefix}.attn.W_O"] = rng.normal(0.0, out_std, (h, dh, d))
        arrays[f"{prefix}.ln2.w"] = np.ones(d)
        arrays[f"{prefix}.mlp.W_in"] = rng.normal(0.0, std, (d, m))
        arrays[f"{prefix}.mlp.b_in"] = np.zeros(m)
        arrays[f"{prefix}.mlp.W_out"] = rng.normal(0.0, out_std, (m, d))
        arrays[f"{prefix}.mlp.b_out"] = np.zeros(d)
    arrays["ln_final.w"] = np.ones(d)
    arrays["unembed.W_U"] = rng.normal(0.0, std, (d, v))
    return Parameters(config, arrays)


# ----------------------------------------------------------------------------
# Intervention plan
# ----------------------------------------------------------------------------

@dataclass
class RunPlan:
    # dst -> [(src, position mask (seq,), replacement source output (batch, seq, d_model))]
    edge_patches: Dict[NodeId, List[Tuple[NodeId, np.ndarray, np.ndarray]]] = field(default_factory=dict)
    # layer -> [(head, source pattern (batch, seq, seq), alpha)]
    pattern_patches: Dict[int, List[Tuple[int, np.ndarray, float]]] = field(default_factory=dict)
    # layer -> [(position, vector (batch, d_model))]
    residual_adds: Dict[int, List[Tuple[int, np.ndarray]]] = field(default_factory=dict)

    def __bool__(self):
        return bool(self.edge_patches or self.pattern_patches or self.residual_adds)


def _as_batch(config: ModelConfig, tokens) -> Tuple[np.ndarray, bool]:
    array = np.asarray(tokens, dtype=np.int64)
    single = array.ndim == 1
    if single:
        array = array[None, :]
    if array.ndim != 2 or array.shape[1] == 0:
        raise ShapeError(f"tokens must be (seq,) or (batch, seq), got shape {array.shape}")
    if array.shape[1] > config.max_seq_len:
        raise ShapeError(f"sequence length {array.shape[1]} exceeds max_seq_len={config.max_seq_len}")
    if array.min() < 0 or array.max() >= config.vocab_size:
        raise ShapeError(f"token ids must lie in [0, {config.vocab_size})")
    return array, single


def _hook(x: Operand, name: str, hooks: Optional[Dict[str, Tensor]]) -> Tensor:
    out = ad.hook(x, name)
    if hooks is not None:
        hooks[name] = out
    return out


def _norm(x: Operand, weight: Operand, config: ModelConfig) -> Tensor:
    if config.linear:
        return ad.mul(x, weight)
    return ad.mul(ad.rms_norm(x, config.norm_eps), weight)


def _patched(base: Tensor, dst: NodeId, plan: RunPlan, values: Dict[NodeId, np.ndarray]) -> Tensor:
    patches = plan.edge_patches.get(dst)
    if not patches:
        return base
    delta = np.zeros(base.shape)
    for src, mask, replacement in patches:
        delta += mask[None, :, None] * (replacement - values[src])
    return ad.add(base, delta)


def _residual_added(resid: Tensor, layer: int, plan: RunPlan) -> Tensor:
    additions = plan.residual_adds.get(layer)
    if not additions:
        return resid
    delta = np.zeros(resid.shape)
    for position, vector in additions:
        delta[:, position] += vector
    return ad.add(resid, delta)


def _forward(
    params: Dict[str, Operand],
    config: ModelConfig,
    tokens: np.ndarray,
    plan: Optional[RunPlan] = None,
    hooks: Optional[Dict[str, Tensor]] = None,
    activation_tape: Optional[ad.Tape] = None,
) -> Tensor:
    plan = plan or RunPlan()
    batch, seq = tokens.shape
    n_heads, d_model = config.n_heads, config.d_model
    values: Dict[NodeId, np.ndarray] = {}

    embed = ad.add(ad.embedding(params["embed.W_E"], tokens), ad.slice_(params["embed.W_pos"], 0, 0, seq))
    if activation_tape is not None:
        # Gradient runs w.r.t. activations start their tape at the embedding
        embed = activation_tape.leaf(embed.data, "embed")
    embed = _hook(embed, "embed", hooks)
    values[NodeId(EMBED)] = embed.data
    resid = embed

    causal = np.triu(np.ones((seq, seq), dtype=bool), k=1)
    uniform = np.tril(np.ones((seq, seq))) / np.arange(1, seq + 1)[:, None]

    for layer in range(config.n_layers):
        p = f"blocks.{layer}"
        resid = _hook(_residual_added(resid, layer, plan), f"{p}.resid_pre", hooks)

        stacked = ad.concat([ad.reshape(resid, (batch, 1, seq, d_model))] * n_heads, axis=1)
        inputs = {}
        for kind, name in ((ATTN_Q, "q_in"), (ATTN_K, "k_in"), (ATTN_V, "v_in")):
            x = stacked
            if any(d.kind == kind and d.layer == layer for d in plan.edge_patches):
                delta = np.zeros(stacked.shape)
                for h in range(n_heads):
                    for src, mask, replacement in plan.edge_patches.get(NodeId(kind, layer, h), ()):
                        delta[:, h] += mask[None, :, None] * (replacement - values[src])
                x = ad.add(stacked, delta)
            inputs[kind] = _hook(x, f"{p}.{name}", hooks)

        v = ad.matmul(_norm(inputs[ATTN_V], params[f"{p}.ln1.w"], config), params[f"{p}.attn.W_V"])
        if config.linear:
            pattern: Operand = np.broadcast_to(uniform, (batch, n_heads, seq, seq)).copy()
        else:
            q = ad.matmul(_norm(inputs[ATTN_Q], params[f"{p}.ln1.w"], config), params[f"{p}.attn.W_Q"])
            k = ad.matmul(_norm(inputs[ATTN_K], params[f"{p}.ln1.w"], config), params[f"{p}.attn.W_K"])
            scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(config.d_head))
            pattern = ad.softmax(scores, causal)

        if layer in plan.pattern_patches:
            keep = np.ones((batch, n_heads, seq, seq))
            addend = np.zeros((batch, n_heads, seq, seq))
            for head, source, alpha in plan.pattern_patches[layer]:
                keep[:, head] = 0.0
                addend[:, head] = alpha * source
            pattern = ad.add(ad.mul(pattern, keep), addend)
        pattern = _hook(pattern, f"{p}.pattern", hooks)

        head_out = _hook(
            ad.matmul(ad.matmul(pattern, v), params[f"{p}.attn.W_O"]), f"{p}.head_out", hooks
        )
        for h in range(n_heads):
            values[NodeId(ATTN_O, layer, h)] = head_out.data[:, h]
        resid = ad.add(resid, ad.sum_(head_out, axis=1))

        mlp_in = _hook(_patched(resid, NodeId(MLP_IN, layer), plan, values), f"{p}.mlp_in", hooks)
        hidden = ad.add(ad.matmul(_norm(mlp_in, params[f"{p}.ln2.w"], config), params[f"{p}.mlp.W_in"]),
                        params[f"{p}.mlp.b_in"])
        if not config.linear:
            hidden = ad.gelu(hidden)
        mlp_out = _hook(
            ad.add(ad.matmul(hidden, params[f"{p}.mlp.W_out"]), params[f"{p}.mlp.b_out"]),
            f"{p}.mlp_out", hooks,
        )
        values[NodeId(MLP_OUT, layer)] = mlp_out.data
        resid = ad.add(resid, mlp_out)

    resid = _hook(_residual_added(resid, config.n_layers, plan), "resid_final", hooks)
    final_in = _hook(_patched(resid, NodeId(RESID_FINAL), plan, values), "final_in", hooks)
    return ad.matmul(_norm(final_in, params["ln_final.w"], config), params["unembed.W_U"])


def _execute(params: Parameters, tokens, plan: Optional[RunPlan] = None, with_cache: bool = False):
    batch, single = _as_batch(params.config, tokens)
    hooks: Optional[Dict[str, Tensor]] = {} if with_cache else None
    start = time.perf_counter()
    logits = _forward(params.arrays, params.config, batch, plan, hooks)
    monitoring.record_forward(batch.shape[0], (time.perf_counter() - start) * 1000.0, patched=bool(plan))
    out = logits.data.copy()
    cache = ActivationCache({n: t.data for n, t in hooks.items()}) if with_cache else None
    if single:
        out = out[0]
    return out, cache


# ----------------------------------------------------------------------------
# Run kinds
# ----------------------------------------------------------------------------

def run(params: Parameters, tokens, plan: Optional[RunPlan] = None) -> np.ndarray:
    """Logits (batch, seq, vocab), or (seq, vocab) for a single unbatched prompt"""
    return _execute(params, tokens, plan)[0]


def run_with_cache(params: Parameters, tokens, plan: Optional[RunPlan] = None) -> Tuple[np.ndarray, ActivationCache]:
    """Logits plus every hook activation. The cache always keeps the batch axis."""
    return _execute(params, tokens, plan, with_cache=True)


def _edge(params: Parameters, edge: EdgeLike) -> Tuple[NodeId, NodeId]:
    src, dst = edge
    src = src if isinstance(src, NodeId) else NodeId.parse(src)
    dst = dst if isinstance(dst, NodeId) else NodeId.parse(dst)
    params.graph.edge_index(src.text, dst.text)
    return src, dst


def edge_patch_plan(
    params: Parameters,
    seq_len: int,
    batch_size: int,
    patch: Sequence[Tuple[EdgeLike, int, np.ndarray]],
) -> RunPlan:
    """Plan replacing the source contribution of each (edge, position) with a given vector"""
    d_model = params.config.d_model
    grouped: Dict[Tuple[NodeId, NodeId], Tuple[np.ndarray, np.ndarray]] = {}
    for edge, position, replacement in patch:
        src, dst = _edge(params, edge)
        if not -seq_len <= position < seq_len:
            raise GraphError(f"position {position} outside sequence of length {seq_len}")
        vector = np.asarray(replacement, dtype=np.float64)
        if vector.shape not in ((d_model,), (batch_size, d_model)):
            raise PatchError(
                f"replacement for {src.text}->{dst.text} has shape {vector.shape}, "
                f"expected ({d_model},) or ({batch_size}, {d_model})"
            )
        mask, full = grouped.get((src, dst), (np.zeros(seq_len), np.zeros((batch_size, seq_len, d_model))))
        mask[position] = 1.0
        full[:, position] = vector
        grouped[(src, dst)] = (mask, full)

    plan = RunPlan()
    for (src, dst), (mask, full) in grouped.items():
        plan.edge_patches.setdefault(dst, []).append((src, mask, full))
    return plan


def run_with_edge_patch(
    params: Parameters, tokens, patch: Sequence[Tuple[EdgeLike, int, np.ndarray]]
) -> np.ndarray:
    """Each listed edge delivers `replacement` at its position instead of its source's output"""
    batch, single = _as_batch(params.config, tokens)
    plan = edge_patch_plan(params, batch.shape[1], batch.shape[0], patch)
    logits = run(params, batch, plan)
    return logits[0] if single else logits


def mask_plan(params: Parameters, replacement: ActivationCache, masks: np.ndarray) -> RunPlan:
    """Plan patching every (edge, position) where `masks` (n_edges, seq) is True with `replacement`"""
    graph = params.graph
    masks = np.asarray(masks, dtype=bool)
    if masks.shape != (len(graph), replacement.seq_len):
        raise PatchError(f"mask shape {masks.shape} != ({len(graph)}, {replacement.seq_len})")
    plan = RunPlan()
    for index in np.flatnonzero(masks.any(axis=1)):
        src, dst = graph.edges[index]
        plan.edge_patches.setdefault(dst, []).append(
            (src, masks[index].astype(np.float64), replacement.node(src))
        )
    return plan


def run_with_edge_masks(params: Parameters, tokens, replacement: ActivationCache, masks: np.ndarray) -> np.ndarray:
    """Bulk edge patching from a cached run of equal shape"""
    batch, _ = _as_batch(params.config, tokens)
    if (replacement.batch_size, replacement.seq_len) != batch.shape:
        raise PatchError(
            f"replacement cache is {replacement.batch_size}x{replacement.seq_len}, tokens are {batch.shape}"
        )
    return run(params, batch, mask_plan(params, replacement, masks))


def _check_head(config: ModelConfig, layer: int, head: int):
    if not 0 <= layer < config.n_layers:
        raise GraphError(f"layer {layer} out of range for {config.n_layers} layers")
    if not 0 <= head < config.n_heads:
        raise GraphError(f"head {head} out of range for {config.n_heads} heads")


def run_with_head_pattern_patch(
    params: Parameters,
    tokens,
    heads: Sequence[Tuple[int, int]],
    source_patterns: Sequence[np.ndarray],
    alpha: float,
) -> np.ndarray:
    """Listed heads use alpha * source pattern as their post-softmax attention matrix"""
    if alpha < 0:
        raise PatchError(f"alpha must be >= 0, got {alpha}")
    if len(heads) != len(source_patterns):
        raise PatchError(f"{len(heads)} heads but {len(source_patterns)} source patterns")
    batch, single = _as_batch(params.config, tokens)
    n, seq = batch.shape
    plan = RunPlan()
    for (layer, head), source in zip(heads, source_patterns):
        _check_head(params.config, layer, head)
        source = np.asarray(source, dtype=np.float64)
        if source.shape[-2:] != (seq, seq) or source.shape not in ((seq, seq), (n, seq, seq)):
            raise PatchError(f"source pattern shape {source.shape} does not match sequence length {seq}")
        if np.abs(np.triu(source, k=1)).max(initial=0.0) > 1e-12:
            raise PatchError(f"source pattern for L{layer}H{head} attends to future positions")
        plan.pattern_patches.setdefault(layer, []).append(
            (head, np.broadcast_to(source, (n, seq, seq)), float(alpha))
        )
    logits = run(params, batch, plan)
    return logits[0] if single else logits


def residual_add_plan(
    config: ModelConfig,
    seq_len: int,
    additions: Sequence[Tuple[int, int, np.ndarray]],
) -> RunPlan:
    plan = RunPlan()
    for layer, position, vector in additions:
        if not 0 <= layer <= config.n_layers:
            raise GraphError(f"residual layer {layer} outside 0..{config.n_layers}")
        if not -seq_len <= position < seq_len:
            raise GraphError(f"position {position} outside sequence of length {seq_len}")
        plan.residual_adds.setdefault(layer, []).append((position, np.asarray(vector, dtype=np.float64)))
    return plan


def run_with_residual_additions(params: Parameters, tokens, additions: Sequence[Tuple[int, int, np.ndarray]]) -> np.ndarray:
    """Stacked additions of (layer, position, vector) to the residual stream"""
    batch, single = _as_batch(params.config, tokens)
    logits = run(params, batch, residual_add_plan(params.config, batch.shape[1], additions))
    return logits[0] if single else logits


def run_with_residual_add(
    params: Parameters,
    tokens,
    source: Tuple[int, int],
    dest: Tuple[int, int],
    vector_source_tokens,
    scale: float = 1.0,
) -> np.ndarray:
    """
    Residual at `dest` (layer, position) becomes its natural value plus `scale` times the
    residual at `source` (layer, position) of a run on `vector_source_tokens`.
    """
    config = params.config
    batch, single = _as_batch(config, tokens)
    src_batch, _ = _as_batch(config, vector_source_tokens)
    if src_batch.shape[0] not in (1, batch.shape[0]):
        raise ShapeError(f"vector source batch {src_batch.shape[0]} does not match {batch.shape[0]}")
    src_layer, src_pos = source
    if not 0 <= src_layer <= config.n_layers:
        raise GraphError(f"residual layer {src_layer} outside 0..{config.n_layers}")
    if not -src_batch.shape[1] <= src_pos < src_batch.shape[1]:
        raise GraphError(f"source position {src_pos} outside sequence of length {src_batch.shape[1]}")
    _, cache = run_with_cache(params, src_batch)
    vector = scale * cache.residual(src_layer, config.n_layers)[:, src_pos]
    logits = run_with_residual_additions(params, batch, [(dest[0], dest[1], vector)])
    return logits[0] if single else logits


def run_with_gradients(
    params: Parameters,
    tokens,
    metric: Callable[[Tensor], Tensor],
) -> Tuple[np.ndarray, ActivationCache, Dict[str, np.ndarray], float]:
    """
    One forward and one backward pass. Returns logits, the cache, d metric / d hook for every
    destination-input hook (q_in, k_in, v_in, mlp_in, final_in) and the metric value.
    """
    config = params.config
    batch, _ = _as_batch(config, tokens)
    hooks: Dict[str, Tensor] = {}
    tape = ad.Tape()
    start = time.perf_counter()
    logits = _forward(params.arrays, config, batch, hooks=hooks, activation_tape=tape)
    value = metric(logits)
    monitoring.record_forward(batch.shape[0], (time.perf_counter() - start) * 1000.0)

    wanted = ["final_in"]
    for layer in range(config.n_layers):
        wanted.extend(f"blocks.{layer}.{n}" for n in ("q_in", "k_in", "v_in", "mlp_in"))
    start = time.perf_counter()
    grads = ad.backward(tape, np.ones(value.shape), [hooks[n].id for n in wanted], output=value)
    monitoring.record_backward((time.perf_counter() - start) * 1000.0)

    cache = ActivationCache({n: t.data for n, t in hooks.items()})
    return logits.data.copy(), cache, {n: grads[hooks[n].id] for n in wanted}, float(value.data.sum())


def forward_logits(tensors: Dict[str, Tensor], config: ModelConfig, tokens: np.ndarray) -> Tensor:
    """Training forward: `tensors` are parameter leaves on a tape"""
    batch, _ = _as_batch(config, tokens)
    return _forward(tensors, config, batch)
