# circuitlab/services/trainer_service.py - Desk-model training and behavioural evaluation
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from circuitlab.core import autodiff as ad
from circuitlab.core.errors import DatasetError, NonFiniteError, TrainingDivergedError
from circuitlab.core.monitoring import monitoring
from circuitlab.models.optimizer import Adam, clip_global_norm
from circuitlab.models.transformer import Parameters, forward_logits, run
from circuitlab.schemas.config import TrainConfig
from circuitlab.schemas.dataset import ErrorType, PromptPair
from circuitlab.schemas.report import AccuracyRow, AccuracySummary
from circuitlab.services.dataset_service import ComputationBatch
from circuitlab.utils.utils import seed_stream

logger = logging.getLogger(__name__)

EVAL_CHUNK = 256


@dataclass
class TrainingData:
    """Per-template batches: validation prompts with a final-position target, computation prompts"""
    validation: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    computation: Dict[str, ComputationBatch] = field(default_factory=dict)

    @classmethod
    def from_pairs(
        cls,
        pairs: Sequence[PromptPair],
        computation: Sequence[ComputationBatch] = (),
    ) -> "TrainingData":
        groups: Dict[str, List[PromptPair]] = {}
        for pair in pairs:
            if pair.error_type in (ErrorType.BOTH, ErrorType.NONE):
                continue
            groups.setdefault(f"{pair.operation.value}/{pair.template_id}", []).append(pair)
        validation = {}
        for key, group in sorted(groups.items()):
            tokens = np.array([p.clean_tokens for p in group] + [p.corrupt_tokens for p in group])
            targets = np.array([p.clean_labels[0] for p in group] + [p.corrupt_labels[0] for p in group])
            validation[key] = (tokens, targets)
        comp = {f"comp/{batch.template_id}/{i}": batch for i, batch in enumerate(computation)}
        return cls(validation, comp)

    def tasks(self) -> List[str]:
        out = []
        if self.validation:
            out.append("validation")
        if self.computation:
            out.append("computation")
        return out


def _final_position_loss(logits: ad.Tensor, positions: Sequence[int], targets: np.ndarray) -> ad.Tensor:
    """Mean cross-entropy over (position, target) columns; target -1 is ignored"""
    batch = logits.shape[0]
    vocab = logits.shape[-1]
    total = None
    count = 0
    for column, position in enumerate(positions):
        target = targets[:, column]
        keep = (target >= 0).astype(np.float64)
        if not keep.any():
            continue
        picked = ad.reshape(ad.slice_(logits, 1, position, position + 1), (batch, vocab))
        log_probs = ad.gather(ad.log_softmax(picked), np.maximum(target, 0)[:, None])
        term = ad.sum_(ad.mul(log_probs, keep[:, None]))
        total = term if total is None else ad.add(total, term)
        count += int(keep.sum())
    return ad.mul(total, -1.0 / count)


class TrainerService:
    """Adam training of the toy transformer on validation and computation prompts"""

    @staticmethod
    def train(
        params: Parameters,
        data: TrainingData,
        config: TrainConfig,
        progress: bool = True,
    ) -> Tuple[Parameters, List[Dict]]:
        trained = params.copy()
        curve: List[Dict] = []
        if config.steps == 0:
            return trained, curve
        tasks = [t for t in data.tasks() if config.task_mix.get(t, 0) > 0]
        if not tasks:
            raise DatasetError("no training data for any task with positive weight")
        weights = np.array([config.task_mix[t] for t in tasks])
        weights = weights / weights.sum()

        rng = seed_stream(config.seed, "train/batches")
        optimizer = Adam(config.lr, config.beta1, config.beta2, config.eps)
        names = trained.names()
        bar = tqdm(range(config.steps), desc="train", disable=not progress)
        for step in bar:
            task = tasks[int(rng.choice(len(tasks), p=weights))]
            groups = data.validation if task == "validation" else data.computation
            key = sorted(groups)[int(rng.integers(0, len(groups)))]
            if task == "validation":
                tokens, targets = groups[key]
                index = rng.integers(0, len(tokens), size=min(config.batch_size, len(tokens)))
                batch_tokens = tokens[index]
                positions = [tokens.shape[1] - 1]
                batch_targets = targets[index][:, None]
            else:
                batch = groups[key]
                index = rng.integers(0, len(batch.tokens), size=min(config.batch_size, len(batch.tokens)))
                batch_tokens = batch.tokens[index]
                positions = [batch.equals, batch.equals + 1]
                batch_targets = batch.targets[index]

            tape = ad.Tape()
            leaves = {name: tape.leaf(trained.arrays[name], name) for name in names}
            try:
                logits = forward_logits(leaves, trained.config, batch_tokens)
                loss = _final_position_loss(logits, positions, batch_targets)
                grads = ad.backward(tape, np.ones(1), [leaves[n].id for n in names], output=loss)
            except NonFiniteError as exc:
                monitoring.record_error(str(exc), f"train step {step}")
                raise TrainingDivergedError(step, float("nan")) from exc
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(step, value)

            named = {n: grads[leaves[n].id].copy() for n in names}
            clip_global_norm(named, config.grad_clip)
            optimizer.step(trained.arrays, named)
            monitoring.record_forward(len(batch_tokens))
            monitoring.record_backward()

            curve.append({"step": step, "loss": value, "task": task})
            if step % config.log_every == 0:
                bar.set_postfix(loss=f"{value:.4f}", task=task)
                logger.info(f"step {step}: {task} loss {value:.4f}")
        return trained, curve

    # ------------------------------------------------------------------
    # Evaluation
    # ------------------------------------------------------------------

    @staticmethod
    def predict_final(params: Parameters, tokens: np.ndarray) -> np.ndarray:
        """Argmax token at the final position, evaluated in chunks"""
        out = []
        for start in range(0, len(tokens), EVAL_CHUNK):
            logits = run(params, tokens[start:start + EVAL_CHUNK])
            out.append(logits[:, -1].argmax(axis=-1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    @staticmethod
    def classify_pairs(params: Parameters, pairs: Sequence[PromptPair]) -> Tuple[np.ndarray, np.ndarray]:
        """Per pair: (clean prompt flagged with a clean label, corrupt prompt given a corrupt label)"""
        clean_ok = np.zeros(len(pairs), dtype=bool)
        corrupt_ok = np.zeros(len(pairs), dtype=bool)
        for indices in _group_by_length(pairs).values():
            clean = TrainerService.predict_final(params, np.array([pairs[i].clean_tokens for i in indices]))
            corrupt = TrainerService.predict_final(params, np.array([pairs[i].corrupt_tokens for i in indices]))
            for k, i in enumerate(indices):
                clean_ok[i] = clean[k] in pairs[i].clean_labels
                corrupt_ok[i] = corrupt[k] in pairs[i].corrupt_labels
        return clean_ok, corrupt_ok

    @staticmethod
    def evaluate_detection_accuracy(params: Parameters, pairs: Sequence[PromptPair]) -> AccuracySummary:
        """Percent of pairs with both prompts classified correctly, mean and std over templates"""
        clean_ok, corrupt_ok = TrainerService.classify_pairs(params, pairs)
        correct = clean_ok & corrupt_ok
        rows = []
        by_template: Dict[int, List[int]] = {}
        for i, pair in enumerate(pairs):
            by_template.setdefault(pair.template_id, []).append(i)
        for template_id, indices in sorted(by_template.items()):
            rows.append(AccuracyRow(
                template_id=template_id,
                error_type=pairs[indices[0]].error_type.value,
                mean=100.0 * float(correct[indices].mean()),
                n_pairs=len(indices),
            ))
        means = np.array([r.mean for r in rows]) if rows else np.zeros(1)
        error_types = sorted({p.error_type.value for p in pairs})
        return AccuracySummary(
            error_type="+".join(error_types) or "none",
            mean=float(means.mean()),
            std=float(means.std()),
            per_template=rows,
        )

    @staticmethod
    def invalid_rate(params: Parameters, pairs: Sequence[PromptPair]) -> float:
        """Fraction of clean prompts whose top prediction is a clean (invalid) label"""
        if not pairs:
            return 0.0
        clean_ok, _ = TrainerService.classify_pairs(params, pairs)
        return float(clean_ok.mean())

    @staticmethod
    def filter_pairs(params: Parameters, pairs: Sequence[PromptPair]) -> List[PromptPair]:
        """Exactly the pairs the model classifies correctly"""
        clean_ok, corrupt_ok = TrainerService.classify_pairs(params, pairs)
        kept = [p for p, a, b in zip(pairs, clean_ok, corrupt_ok) if a and b]
        logger.info(f"Kept {len(kept)}/{len(pairs)} correctly classified pairs")
        return kept


def _group_by_length(pairs: Sequence[PromptPair]) -> Dict[int, List[int]]:
    groups: Dict[int, List[int]] = {}
    for i, pair in enumerate(pairs):
        groups.setdefault(pair.length, []).append(i)
    return groups


def train(params: Parameters, data: TrainingData, config: TrainConfig, progress: bool = False):
    return TrainerService.train(params, data, config, progress)


def evaluate_detection_accuracy(params: Parameters, pairs: Sequence[PromptPair]) -> AccuracySummary:
    return TrainerService.evaluate_detection_accuracy(params, pairs)


def filter_pairs(params: Parameters, pairs: Sequence[PromptPair]) -> List[PromptPair]:
    return TrainerService.filter_pairs(params, pairs)
