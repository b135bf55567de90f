# circuitlab/services/intervention_service.py - Head-pattern patching, residual bridging, consistency heads
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from circuitlab.core.config import settings
from circuitlab.core.errors import InterventionError
from circuitlab.models.graph import ATTN_INPUTS, ATTN_O, ComputationGraph, NodeId
from circuitlab.models.transformer import (
    Parameters,
    run,
    run_with_cache,
    run_with_head_pattern_patch,
    run_with_residual_additions,
)
from circuitlab.schemas.circuit import Circuit
from circuitlab.schemas.dataset import ErrorType, PromptPair
from circuitlab.schemas.intervention import (
    AccuracyDelta,
    BridgeReport,
    HeadPatchReport,
    HeadScore,
    InterventionKind,
    InterventionSpec,
    SourceSelector,
)
from circuitlab.services.patching_service import label_map_of
from circuitlab.utils.utils import seed_stream

logger = logging.getLogger(__name__)

EVAL_CHUNK = 128

# Error conditions under which result and answer agree / disagree
MATCH_CONDITIONS = ("none", "both")
MISMATCH_CONDITIONS = ("result", "answer")
CONDITIONS = MATCH_CONDITIONS + MISMATCH_CONDITIONS

# (query label, key label) for the first and second digit
FIRST_DIGIT = ("answer-first", "result-first")
SECOND_DIGIT = ("answer-second", "result-second")


def _groups(pairs: Sequence[PromptPair]) -> Dict[Tuple, List[int]]:
    groups: Dict[Tuple, List[int]] = {}
    for i, pair in enumerate(pairs):
        groups.setdefault((pair.operation, pair.template_id, pair.length), []).append(i)
    return groups


def _chunks(indices: List[int]):
    for start in range(0, len(indices), EVAL_CHUNK):
        yield indices[start:start + EVAL_CHUNK]


def _final_predictions(logits: np.ndarray) -> np.ndarray:
    return logits[:, -1].argmax(axis=-1)


def _label_index(pair: PromptPair, label: str) -> int:
    try:
        return label_map_of(pair).index_of(label)
    except KeyError as exc:
        raise InterventionError(f"position label {label!r} not defined for template {pair.template_id}") from exc


def _accuracy(pairs: Sequence[PromptPair], error_pred: np.ndarray, valid_pred: np.ndarray) -> Tuple[float, float]:
    """(pair accuracy %, invalid-prediction rate %) over the error prompts"""
    flagged = np.array([p in pair.clean_labels for p, pair in zip(error_pred, pairs)])
    passed = np.array([p in pair.corrupt_labels for p, pair in zip(valid_pred, pairs)])
    if not len(pairs):
        return 0.0, 0.0
    return 100.0 * float((flagged & passed).mean()), 100.0 * float(flagged.mean())


def _delta(pairs, before_err, before_valid, after_err, after_valid) -> AccuracyDelta:
    acc_before, invalid_before = _accuracy(pairs, before_err, before_valid)
    acc_after, invalid_after = _accuracy(pairs, after_err, after_valid)
    return AccuracyDelta(
        accuracy_before=acc_before,
        accuracy_after=acc_after,
        invalid_rate_before=invalid_before,
        invalid_rate_after=invalid_after,
        n_pairs=len(pairs),
    )


def _check_heads(graph: ComputationGraph, heads: Sequence[Tuple[int, int]]):
    available = set(graph.heads())
    for layer, head in heads:
        if (layer, head) not in available:
            raise InterventionError(
                f"head L{layer}H{head} out of range for {graph.n_layers} layers x {graph.n_heads} heads"
            )


def circuit_heads(graph: ComputationGraph, circuit: Optional[Circuit]) -> List[Tuple[int, int]]:
    """Attention heads touched by a circuit's edges; every head when no circuit is given"""
    if circuit is None:
        return graph.heads()
    heads = set()
    for member in circuit.members:
        for text in (member.src, member.dst):
            node = NodeId.parse(text)
            if node.kind == ATTN_O or node.kind in ATTN_INPUTS:
                heads.add((node.layer, node.head))
    return sorted(heads)


class InterventionService:
    """Causal interventions on attention patterns and the residual stream"""

    # ------------------------------------------------------------------
    # Head-pattern patching
    # ------------------------------------------------------------------

    @staticmethod
    def patched_error_predictions(
        params: Parameters,
        target_pairs: Sequence[PromptPair],
        source_pairs: Sequence[PromptPair],
        heads: Sequence[Tuple[int, int]],
        alpha: float,
    ) -> np.ndarray:
        """Final-position predictions on each target error prompt with `heads` set to alpha x source pattern"""
        predictions = np.zeros(len(target_pairs), dtype=np.int64)
        for indices in _groups(target_pairs).values():
            for chunk in _chunks(indices):
                targets = np.array([target_pairs[i].clean_tokens for i in chunk])
                if not heads:
                    predictions[chunk] = _final_predictions(run(params, targets))
                    continue
                _, source_cache = run_with_cache(params, np.array([source_pairs[i].clean_tokens for i in chunk]))
                patterns = [source_cache.pattern(layer, head) for layer, head in heads]
                logits = run_with_head_pattern_patch(params, targets, heads, patterns, alpha)
                predictions[chunk] = _final_predictions(logits)
        return predictions

    @staticmethod
    def _baseline(params: Parameters, pairs: Sequence[PromptPair]) -> Tuple[np.ndarray, np.ndarray]:
        error_pred = np.zeros(len(pairs), dtype=np.int64)
        valid_pred = np.zeros(len(pairs), dtype=np.int64)
        for indices in _groups(pairs).values():
            for chunk in _chunks(indices):
                error_pred[chunk] = _final_predictions(run(params, np.array([pairs[i].clean_tokens for i in chunk])))
                valid_pred[chunk] = _final_predictions(run(params, np.array([pairs[i].corrupt_tokens for i in chunk])))
        return error_pred, valid_pred

    @staticmethod
    def patch_heads_eval(
        params: Parameters,
        target_pairs: Sequence[PromptPair],
        source_pairs: Sequence[PromptPair],
        heads: Sequence[Tuple[int, int]],
        alpha: float,
    ) -> AccuracyDelta:
        """
        Detection accuracy of the target pairs before and after replacing the listed heads'
        attention on each error prompt with alpha times the aligned source prompt's attention.
        Valid prompts are left unpatched.
        """
        if alpha <= 0:
            raise InterventionError(f"head-pattern interventions need alpha > 0, got {alpha}")
        if len(target_pairs) != len(source_pairs):
            raise InterventionError(f"{len(target_pairs)} target pairs but {len(source_pairs)} source pairs")
        for i, (target, source) in enumerate(zip(target_pairs, source_pairs)):
            if (target.operation, target.template_id, target.length) != (
                source.operation, source.template_id, source.length
            ):
                raise InterventionError(f"pair {i}: target and source prompts come from different templates")
        _check_heads(params.graph, heads)

        error_pred, valid_pred = InterventionService._baseline(params, target_pairs)
        patched = InterventionService.patched_error_predictions(params, target_pairs, source_pairs, heads, alpha)
        return _delta(target_pairs, error_pred, valid_pred, patched, valid_pred)

    @staticmethod
    def random_control_heads(
        graph: ComputationGraph, exclude: Sequence[Tuple[int, int]], count: int, seed: int
    ) -> List[Tuple[int, int]]:
        """Uniform sample of `count` heads outside `exclude`, without replacement"""
        excluded = set(map(tuple, exclude))
        available = [h for h in graph.heads() if h not in excluded]
        if count > len(available):
            raise InterventionError(f"need {count} control heads but only {len(available)} are available")
        rng = seed_stream(seed, "interventions/control-heads")
        picked = rng.choice(len(available), size=count, replace=False)
        return sorted(available[i] for i in picked)

    @staticmethod
    def head_patch_experiment(
        params: Parameters,
        target_pairs: Sequence[PromptPair],
        source_pairs: Sequence[PromptPair],
        heads: Sequence[Tuple[int, int]],
        alpha: float,
        direction: str = "forward",
        control_seed: Optional[int] = None,
        exclude_heads: Sequence[Tuple[int, int]] = (),
    ) -> HeadPatchReport:
        """
        Head patch plus the same intervention on an equal number of random control heads.
        Controls never include the patched heads or `exclude_heads` (every flagged consistency head).
        """
        spec = InterventionSpec(
            kind=InterventionKind.HEAD_PATTERN,
            heads=list(heads),
            alpha=alpha,
            source=_selector(source_pairs),
        )
        result = InterventionService.patch_heads_eval(params, target_pairs, source_pairs, heads, alpha)
        logger.info(
            f"{direction} {spec.describe()}: accuracy {result.accuracy_before:.1f} -> {result.accuracy_after:.1f}"
        )
        report = HeadPatchReport(
            spec=spec,
            direction=direction,
            target_condition=_condition(target_pairs),
            source_condition=_condition(source_pairs),
            result=result,
        )
        if control_seed is not None and heads:
            try:
                control_heads = InterventionService.random_control_heads(
                    params.graph, [*heads, *exclude_heads], len(heads), control_seed
                )
            except InterventionError as exc:
                logger.warning(f"Skipping random control: {exc}")
                return report
            report.control_heads = control_heads
            report.control = InterventionService.patch_heads_eval(
                params, target_pairs, source_pairs, control_heads, alpha
            )
            logger.info(
                f"control heads accuracy {report.control.accuracy_before:.1f} -> {report.control.accuracy_after:.1f}"
            )
        return report

    # ------------------------------------------------------------------
    # Residual bridging
    # ------------------------------------------------------------------

    @staticmethod
    def bridged_predictions(params: Parameters, pairs: Sequence[PromptPair], spec: InterventionSpec, use_clean: bool) -> np.ndarray:
        n_layers = params.config.n_layers
        predictions = np.zeros(len(pairs), dtype=np.int64)
        for indices in _groups(pairs).values():
            src_pos = _label_index(pairs[indices[0]], spec.src_pos)
            dst_pos = _label_index(pairs[indices[0]], spec.dst_pos)
            for chunk in _chunks(indices):
                tokens = np.array([
                    pairs[i].clean_tokens if use_clean else pairs[i].corrupt_tokens for i in chunk
                ])
                _, cache = run_with_cache(params, tokens)
                vector = spec.scale * cache.residual(spec.src_layer, n_layers)[:, src_pos]
                logits = run_with_residual_additions(params, tokens, [(spec.dst_layer, dst_pos, vector)])
                predictions[chunk] = _final_predictions(logits)
        return predictions

    @staticmethod
    def residual_bridge_eval(params: Parameters, pairs: Sequence[PromptPair], spec: InterventionSpec) -> AccuracyDelta:
        """Every prompt gets scale x its own residual at (src_layer, src_pos) added at (dst_layer, dst_pos)"""
        if spec.kind != InterventionKind.RESIDUAL_BRIDGE:
            raise InterventionError(f"expected a residual-bridge spec, got {spec.kind.value}")
        n_layers = params.config.n_layers
        for name, layer in (("source", spec.src_layer), ("destination", spec.dst_layer)):
            if not 0 <= layer <= n_layers:
                raise InterventionError(f"{name} layer {layer} outside 0..{n_layers}")
        if spec.src_layer < spec.dst_layer:
            raise InterventionError(
                f"bridge source layer {spec.src_layer} lies below destination layer {spec.dst_layer}"
            )
        error_pred, valid_pred = InterventionService._baseline(params, pairs)
        after_err = InterventionService.bridged_predictions(params, pairs, spec, use_clean=True)
        after_valid = InterventionService.bridged_predictions(params, pairs, spec, use_clean=False)
        return _delta(pairs, error_pred, valid_pred, after_err, after_valid)

    @staticmethod
    def bridge_experiment(
        params: Parameters,
        consistent_pairs: Sequence[PromptPair],
        single_pairs: Dict[str, Sequence[PromptPair]],
        spec: InterventionSpec,
    ) -> BridgeReport:
        consistent = InterventionService.residual_bridge_eval(params, consistent_pairs, spec)
        logger.info(
            f"{spec.describe()}: consistent-error accuracy "
            f"{consistent.accuracy_before:.1f} -> {consistent.accuracy_after:.1f}"
        )
        single = {
            name: InterventionService.residual_bridge_eval(params, pairs, spec)
            for name, pairs in single_pairs.items() if pairs
        }
        return BridgeReport(spec=spec, consistent=consistent, single=single)

    # ------------------------------------------------------------------
    # Consistency heads
    # ------------------------------------------------------------------

    @staticmethod
    def average_attention(params: Parameters, prompts, head: Tuple[int, int]) -> np.ndarray:
        """Elementwise mean of one head's post-softmax attention over same-length prompts"""
        tokens = np.asarray(prompts, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        if tokens.shape[0] == 0:
            raise InterventionError("average attention needs at least one prompt")
        _check_heads(params.graph, [head])
        layer, index = head
        total = np.zeros((tokens.shape[1], tokens.shape[1]))
        for start in range(0, len(tokens), EVAL_CHUNK):
            _, cache = run_with_cache(params, tokens[start:start + EVAL_CHUNK])
            total += cache.pattern(layer, index).sum(axis=0)
        return total / len(tokens)

    @staticmethod
    def condition_prompts(pairs_by_error: Dict[str, Sequence[PromptPair]]) -> Dict[str, Sequence[PromptPair]]:
        """Error-type datasets -> the four attention conditions (error-free prompts come from the valid side)"""
        missing = [c for c in MISMATCH_CONDITIONS + ("both",) if not pairs_by_error.get(c)]
        if missing:
            raise InterventionError(f"missing condition sets: {', '.join(missing)}")
        sets = {c: pairs_by_error[c] for c in ("result", "answer", "both")}
        sets["none"] = pairs_by_error.get("none") or pairs_by_error["result"]
        return sets

    @staticmethod
    def _digit_attention(
        params: Parameters, pairs: Sequence[PromptPair], heads: Sequence[Tuple[int, int]], use_clean: bool
    ) -> Dict[Tuple[int, int], Tuple[float, float]]:
        """Per head, mean attention answer-first -> result-first and answer-second -> result-second"""
        sums = {h: np.zeros(2) for h in heads}
        count = 0
        for indices in _groups(pairs).values():
            first = [_label_index(pairs[indices[0]], label) for label in FIRST_DIGIT]
            second = [_label_index(pairs[indices[0]], label) for label in SECOND_DIGIT]
            tokens = np.array([pairs[i].clean_tokens if use_clean else pairs[i].corrupt_tokens for i in indices])
            for layer, head in heads:
                pattern = InterventionService.average_attention(params, tokens, (layer, head))
                sums[(layer, head)] += len(indices) * np.array(
                    [pattern[first[0], first[1]], pattern[second[0], second[1]]]
                )
            count += len(indices)
        return {h: tuple(v / count) for h, v in sums.items()}

    @staticmethod
    def detect_consistency_heads(
        params: Parameters,
        circuit: Optional[Circuit],
        prompt_sets: Dict[str, Sequence[PromptPair]],
        first_digit_min: Optional[float] = None,
        match_gap_min: Optional[float] = None,
    ) -> List[HeadScore]:
        """
        Score = digit-to-digit attention (answer digits onto result digits) averaged over the match
        conditions (no error, consistent error) minus the same average over the mismatch
        conditions (result error, answer error). Heads are returned by decreasing |score|.
        """
        missing = [c for c in CONDITIONS if not prompt_sets.get(c)]
        if missing:
            raise InterventionError(f"missing condition sets: {', '.join(missing)}")
        first_digit_min = settings.CONSISTENCY_FIRST_DIGIT_MIN if first_digit_min is None else first_digit_min
        match_gap_min = settings.CONSISTENCY_MATCH_GAP_MIN if match_gap_min is None else match_gap_min
        if circuit is not None and circuit.model_fingerprint != params.fingerprint():
            raise InterventionError("circuit belongs to a different model")
        heads = circuit_heads(params.graph, circuit)

        stats: Dict[str, Dict[Tuple[int, int], Tuple[float, float]]] = {}
        for condition in CONDITIONS:
            # error-free prompts are the valid side of the pairs
            stats[condition] = InterventionService._digit_attention(
                params, prompt_sets[condition], heads, use_clean=condition != "none"
            )

        scores = []
        for head in heads:
            match = np.mean([np.mean(stats[c][head]) for c in MATCH_CONDITIONS])
            mismatch = np.mean([np.mean(stats[c][head]) for c in MISMATCH_CONDITIONS])
            score = float(match - mismatch)
            first = {c: float(stats[c][head][0]) for c in CONDITIONS}
            second = {c: float(stats[c][head][1]) for c in CONDITIONS}
            scores.append(HeadScore(
                layer=head[0],
                head=head[1],
                score=score,
                first_digit=first,
                second_digit=second,
                consistency=min(first.values()) >= first_digit_min and score >= match_gap_min,
                inverse=score < 0,
            ))
        scores.sort(key=lambda s: (-abs(s.score), s.layer, s.head))
        flagged = [s.name for s in scores if s.consistency]
        logger.info(f"Consistency heads: {', '.join(flagged) or 'none above thresholds'}")
        return scores


def _condition(pairs: Sequence[PromptPair]) -> str:
    return "+".join(sorted({p.error_type.value for p in pairs})) or "none"


def _selector(pairs: Sequence[PromptPair]) -> SourceSelector:
    types = {p.error_type for p in pairs}
    if types == {ErrorType.BOTH}:
        return SourceSelector.CONSISTENT_ERROR
    if types and types <= {ErrorType.RESULT, ErrorType.ANSWER}:
        return SourceSelector.SINGLE_ERROR
    return SourceSelector.SELF


def consistency_heads(scores: Sequence[HeadScore]) -> List[Tuple[int, int]]:
    return [(s.layer, s.head) for s in scores if s.consistency]


def top_heads(scores: Sequence[HeadScore], count: int) -> List[Tuple[int, int]]:
    """Flagged consistency heads first, then the highest positive scores"""
    ranked = [s for s in scores if s.consistency] + [s for s in scores if not s.consistency and s.score > 0]
    return [(s.layer, s.head) for s in ranked[:count]]


def patch_heads_eval(params, target_pairs, source_pairs, heads, alpha) -> AccuracyDelta:
    return InterventionService.patch_heads_eval(params, target_pairs, source_pairs, heads, alpha)


def random_control_heads(graph, exclude, count, seed) -> List[Tuple[int, int]]:
    return InterventionService.random_control_heads(graph, exclude, count, seed)


def residual_bridge_eval(params, pairs, spec) -> AccuracyDelta:
    return InterventionService.residual_bridge_eval(params, pairs, spec)


def detect_consistency_heads(params, circuit, prompt_sets) -> List[HeadScore]:
    return InterventionService.detect_consistency_heads(params, circuit, prompt_sets)


def average_attention(params, prompts, head) -> np.ndarray:
    return InterventionService.average_attention(params, prompts, head)
