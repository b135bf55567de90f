# circuitlab/services/patching_service.py - Logit-difference metric, exact patching and EAP
import logging
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from circuitlab.core import autodiff as ad
from circuitlab.core.config import settings
from circuitlab.core.errors import GraphError, MetricError, PatchError
from circuitlab.models.graph import NodeId
from circuitlab.models.transformer import Parameters, mask_plan, run, run_with_cache, run_with_gradients
from circuitlab.schemas.circuit import AttributionTable
from circuitlab.schemas.dataset import MetricSpec, PromptPair, TokenLabelMap

logger = logging.getLogger(__name__)

EAP_CHUNK = 64


# ----------------------------------------------------------------------------
# Metric
# ----------------------------------------------------------------------------

def _check_metric(metric: MetricSpec, seq_len: int) -> int:
    if not metric.clean_token_ids or not metric.corrupt_token_ids:
        raise MetricError("logit difference needs non-empty clean and corrupt token sets")
    if not -seq_len <= metric.position < seq_len:
        raise MetricError(f"metric position {metric.position} outside sequence of length {seq_len}")
    return metric.position % seq_len


def logit_diff(logits: np.ndarray, metric: MetricSpec) -> float:
    """mean(clean-token logits) - mean(corrupt-token logits) at the metric position, batch-averaged"""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 2:
        logits = logits[None]
    position = _check_metric(metric, logits.shape[1])
    at = logits[:, position]
    diff = at[:, metric.clean_token_ids].mean(axis=-1) - at[:, metric.corrupt_token_ids].mean(axis=-1)
    return float(metric.scale * diff.mean())


class PairMetric:
    """Per-pair logit-difference metric over a batch of same-length prompts"""

    def __init__(self, clean_ids: np.ndarray, corrupt_ids: np.ndarray, position: int = -1, scale: float = 1.0):
        self.clean_ids = np.asarray(clean_ids, dtype=np.int64)
        self.corrupt_ids = np.asarray(corrupt_ids, dtype=np.int64)
        if self.clean_ids.ndim != 2 or self.corrupt_ids.ndim != 2:
            raise MetricError("token id arrays must be (batch, k)")
        if self.clean_ids.shape[1] == 0 or self.corrupt_ids.shape[1] == 0:
            raise MetricError("logit difference needs non-empty clean and corrupt token sets")
        self.position = position
        self.scale = scale

    @classmethod
    def for_pairs(cls, pairs: Sequence[PromptPair], metric: Optional[MetricSpec] = None) -> "PairMetric":
        if metric is not None:
            n = len(pairs)
            return cls(
                np.tile(metric.clean_token_ids, (n, 1)),
                np.tile(metric.corrupt_token_ids, (n, 1)),
                metric.position,
                metric.scale,
            )
        widths = {(len(p.clean_labels), len(p.corrupt_labels)) for p in pairs}
        if len(widths) != 1:
            raise MetricError("pairs in one batch must carry the same number of label tokens")
        return cls(
            np.array([p.clean_labels for p in pairs]),
            np.array([p.corrupt_labels for p in pairs]),
        )

    def select(self, index) -> "PairMetric":
        return PairMetric(self.clean_ids[index], self.corrupt_ids[index], self.position, self.scale)

    def _position(self, seq_len: int) -> int:
        if not -seq_len <= self.position < seq_len:
            raise MetricError(f"metric position {self.position} outside sequence of length {seq_len}")
        return self.position % seq_len

    def values(self, logits: np.ndarray) -> np.ndarray:
        """(batch,) metric per prompt"""
        position = self._position(logits.shape[1])
        at = logits[:, position]
        clean = np.take_along_axis(at, self.clean_ids, axis=-1).mean(axis=-1)
        corrupt = np.take_along_axis(at, self.corrupt_ids, axis=-1).mean(axis=-1)
        return self.scale * (clean - corrupt)

    def tensor(self, logits: ad.Tensor) -> ad.Tensor:
        """Batch sum of the metric, on the logits' tape"""
        batch, seq, vocab = logits.shape
        position = self._position(seq)
        at = ad.reshape(ad.slice_(logits, 1, position, position + 1), (batch, vocab))
        clean = ad.mul(ad.sum_(ad.gather(at, self.clean_ids)), self.scale / self.clean_ids.shape[1])
        corrupt = ad.mul(ad.sum_(ad.gather(at, self.corrupt_ids)), -self.scale / self.corrupt_ids.shape[1])
        return ad.add(clean, corrupt)


def label_map_of(pair: PromptPair) -> TokenLabelMap:
    return TokenLabelMap(
        template_id=pair.template_id,
        operation=pair.operation,
        length=pair.length,
        labels=pair.position_labels,
    )


def check_same_template(pairs: Sequence[PromptPair]):
    if not pairs:
        raise PatchError("at least one pair is required")
    keys = {(p.operation, p.template_id, p.task, p.length) for p in pairs}
    if len(keys) != 1:
        raise PatchError(f"pairs must share one template and length, got {len(keys)} groups")
    for i, pair in enumerate(pairs):
        if len(pair.clean_tokens) != len(pair.corrupt_tokens):
            raise PatchError(f"pair {i}: clean/corrupt length mismatch")


# ----------------------------------------------------------------------------
# Exact activation patching
# ----------------------------------------------------------------------------

class PatchingService:
    """Exact patching oracle and edge attribution patching"""

    @staticmethod
    def exact_patch_effect(
        params: Parameters,
        pair: PromptPair,
        edge: Tuple[str, str],
        position: int,
        metric: Optional[MetricSpec] = None,
    ) -> float:
        """metric(corrupt run with the edge carrying its clean value at `position`) - metric(corrupt)"""
        if len(pair.clean_tokens) != len(pair.corrupt_tokens):
            raise PatchError("clean and corrupt prompts differ in length")
        effects = PatchingService.exact_patch_sweep(
            params, [pair], [(params.graph.edge_index(*edge), position)], metric
        )
        return float(effects[0, 0])

    @staticmethod
    def exact_patch_sweep(
        params: Parameters,
        pairs: Sequence[PromptPair],
        instances: Sequence[Tuple[int, int]],
        metric: Optional[MetricSpec] = None,
    ) -> np.ndarray:
        """Signed per-pair effects, shape (len(instances), len(pairs)); one patched run per instance"""
        check_same_template(pairs)
        graph = params.graph
        seq_len = pairs[0].length
        pair_metric = PairMetric.for_pairs(pairs, metric)
        clean = np.array([p.clean_tokens for p in pairs])
        corrupt = np.array([p.corrupt_tokens for p in pairs])
        _, clean_cache = run_with_cache(params, clean)
        baseline = pair_metric.values(run(params, corrupt))

        effects = np.zeros((len(instances), len(pairs)))
        for k, (edge_index, position) in enumerate(instances):
            if not 0 <= edge_index < len(graph):
                raise GraphError(f"edge index {edge_index} out of range")
            if not -seq_len <= position < seq_len:
                raise GraphError(f"position {position} outside sequence of length {seq_len}")
            masks = np.zeros((len(graph), seq_len), dtype=bool)
            masks[edge_index, position] = True
            patched = run(params, corrupt, mask_plan(params, clean_cache, masks))
            effects[k] = pair_metric.values(patched) - baseline
        return effects

    # ------------------------------------------------------------------
    # Edge attribution patching
    # ------------------------------------------------------------------

    @staticmethod
    def eap_scores(
        params: Parameters,
        pairs: Sequence[PromptPair],
        metric: Optional[MetricSpec] = None,
        abs_per_pair: Optional[bool] = None,
        chunk_size: int = EAP_CHUNK,
    ) -> AttributionTable:
        """
        score(edge, pos) = |(z_clean - z_corrupt) . d metric / d dst_input| at the corrupt run,
        averaged over pairs. Each chunk of pairs costs two forward passes and one backward pass.
        """
        check_same_template(pairs)
        abs_per_pair = settings.EAP_ABS_PER_PAIR if abs_per_pair is None else abs_per_pair
        graph = params.graph
        seq_len = pairs[0].length
        totals = np.zeros((len(graph), seq_len))
        pair_metric = PairMetric.for_pairs(pairs, metric)

        for start in range(0, len(pairs), chunk_size):
            chunk = pairs[start:start + chunk_size]
            chunk_metric = pair_metric.select(slice(start, start + len(chunk)))
            _, clean_cache = run_with_cache(params, np.array([p.clean_tokens for p in chunk]))
            _, corrupt_cache, grads, _ = run_with_gradients(
                params, np.array([p.corrupt_tokens for p in chunk]), chunk_metric.tensor
            )
            diffs: Dict[NodeId, np.ndarray] = {
                src: clean_cache.node(src) - corrupt_cache.node(src) for src in graph.sources
            }
            for index, (src, dst) in enumerate(graph.edges):
                name, head = dst.hook
                if name not in grads:
                    raise GraphError(f"no gradient recorded for {dst.text} (hook {name})")
                grad = grads[name] if head is None else grads[name][:, head]
                per_pair = np.einsum("btd,btd->bt", diffs[src], grad)
                totals[index] += np.abs(per_pair).sum(axis=0) if abs_per_pair else per_pair.sum(axis=0)

        scores = totals / len(pairs)
        if not abs_per_pair:
            scores = np.abs(scores)
        label_map = label_map_of(pairs[0])
        return AttributionTable(
            edges=graph.edge_texts(),
            scores=scores,
            position_labels=label_map.all_labels(),
            template_id=pairs[0].template_id,
            operation=pairs[0].operation.value,
            metadata={
                "n_pairs": len(pairs),
                "metric": "logit_diff",
                "metric_scale": pair_metric.scale,
                "abs_per_pair": abs_per_pair,
                "error_types": sorted({p.error_type.value for p in pairs}),
                "task": pairs[0].task,
                "model_fingerprint": params.fingerprint(),
            },
        )

    @staticmethod
    def spearman_agreement(
        params: Parameters,
        table: AttributionTable,
        pairs: Sequence[PromptPair],
        top_k: int = 200,
        metric: Optional[MetricSpec] = None,
    ) -> Tuple[float, np.ndarray, np.ndarray]:
        """Spearman rho between EAP scores and mean |exact effect| over the top-k instances"""
        ranked = table.ranked()[:top_k]
        instances = [(e, p) for e, p, _ in ranked]
        eap = np.array([s for _, _, s in ranked])
        effects = PatchingService.exact_patch_sweep(params, pairs, instances, metric)
        exact = np.abs(effects).mean(axis=1)
        rho = stats.spearmanr(eap, exact).correlation
        logger.info(f"EAP/exact Spearman over top-{len(instances)}: {rho:.3f}")
        return float(rho), eap, exact


def exact_patch_effect(params, pair, edge, position, metric=None) -> float:
    return PatchingService.exact_patch_effect(params, pair, edge, position, metric)


def eap_scores(params, pairs, metric=None) -> AttributionTable:
    return PatchingService.eap_scores(params, pairs, metric)
