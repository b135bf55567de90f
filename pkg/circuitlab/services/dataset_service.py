# circuitlab/services/dataset_service.py - Clean/corrupt prompt pairs, label maps, computation prompts
import logging
import re
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from circuitlab.core.config import settings
from circuitlab.core.errors import DatasetError
from circuitlab.schemas.dataset import ErrorType, Operation, PromptPair, TokenLabelMap
from circuitlab.services.template_config import Template, TemplateConfig
from circuitlab.services.tokenizer_service import Tokenizer, get_tokenizer
from circuitlab.utils.utils import seed_stream

logger = logging.getLogger(__name__)

_SPLIT = re.compile(r"(\[(?:instruction|name|object|verb|pronoun|num1|num2|num3)\])")
OPERATORS = {"+", "-", "×", "÷"}


@dataclass
class RenderedPrompt:
    tokens: List[int]
    words: List[str]
    spans: Dict[str, List[Tuple[int, int]]]  # placeholder -> [(start, end)] token spans


@dataclass
class ComputationBatch:
    """Correct-equation prompts cut after the first result digit"""
    template_id: int
    tokens: np.ndarray   # (n, equals + 2)
    targets: np.ndarray  # (n, 2): first digit at "=", second digit at result-first, -1 = no target
    equals: int


def _resolve_template(template, operation=None) -> Template:
    if isinstance(template, Template):
        if operation is not None and Operation(operation) != template.operation:
            raise DatasetError(
                f"template {template.id} is a {template.operation.value} template, "
                f"not {Operation(operation).value}"
            )
        return template
    return TemplateConfig.get_template(int(template), operation or "add")


class DatasetService:
    """Template rendering and pair generation"""

    def __init__(self, tokenizer: Optional[Tokenizer] = None, max_dividend: Optional[int] = None):
        self.tokenizer = tokenizer or get_tokenizer()
        self.max_dividend = max_dividend or settings.DIVISION_MAX_DIVIDEND
        self._instructions: Optional[List[str]] = None

    # ------------------------------------------------------------------
    # Rendering
    # ------------------------------------------------------------------

    def instructions(self) -> List[str]:
        """Instruction variants sharing the most common token length"""
        if self._instructions is None:
            variants = [
                instruction.format(pair=pair)
                for instruction in TemplateConfig.INSTRUCTIONS
                for pair in TemplateConfig.CORRECT_PAIRS
            ]
            lengths = [len(self.tokenizer.split(v)) for v in variants]
            counts: Dict[int, int] = {}
            for length in lengths:
                counts[length] = counts.get(length, 0) + 1
            common = min(counts, key=lambda n: (-counts[n], n))
            self._instructions = [v for v, n in zip(variants, lengths) if n == common]
        return self._instructions

    def render(self, template: Template, values: Dict[str, str]) -> RenderedPrompt:
        """`values` holds instruction, name, object, verb, pronoun, num1, num2, result, answer"""
        words: List[str] = []
        spans: Dict[str, List[Tuple[int, int]]] = {}
        num3_seen = 0
        for piece in _SPLIT.split(template.text):
            if not piece:
                continue
            if piece.startswith("[") and piece.endswith("]"):
                name = piece[1:-1]
                if name == "num3":
                    name = "result" if num3_seen == 0 else "answer"
                    num3_seen += 1
                piece_words = self.tokenizer.split(str(values[name]))
                start = len(words) + 1  # offset by <bos>
                spans.setdefault(name, []).append((start, start + len(piece_words)))
                words.extend(piece_words)
            else:
                words.extend(self.tokenizer.split(piece))
        if num3_seen != 2:
            raise DatasetError(f"template {template.key} must show [num3] twice, found {num3_seen}")
        tokens = [self.tokenizer.bos_id] + [self.tokenizer.token_id(w) for w in words]
        return RenderedPrompt(tokens, ["<bos>"] + words, spans)

    def canonical_values(self, template: Template) -> Dict[str, str]:
        num1, num2 = TemplateConfig.legal_operands(template.operation, self.max_dividend)[0]
        result = TemplateConfig.compute(template.operation, num1, num2)
        return {
            "instruction": self.instructions()[0],
            "name": TemplateConfig.NAMES[0],
            "object": TemplateConfig.OBJECTS[0],
            "verb": TemplateConfig.verbs(template.operation)[0],
            "pronoun": TemplateConfig.PRONOUNS[0],
            "num1": str(num1),
            "num2": str(num2),
            "result": str(result),
            "answer": str(result),
        }

    # ------------------------------------------------------------------
    # Label maps
    # ------------------------------------------------------------------

    def label_positions(self, template, operation=None) -> TokenLabelMap:
        template = _resolve_template(template, operation)
        rendered = self.render(template, self.canonical_values(template))
        return self._label_map(template, rendered)

    def _label_map(self, template: Template, rendered: RenderedPrompt) -> TokenLabelMap:
        words, spans = rendered.words, rendered.spans

        def fail(label):
            raise DatasetError(f"label {label!r} not locatable in template {template.key}")

        for name in ("num1", "num2", "result", "answer"):
            if name not in spans:
                fail(name)
        result_start, result_end = spans["result"][0]
        answer_start, answer_end = spans["answer"][0]
        if result_end - result_start != 2 or answer_end - answer_start != 2:
            fail("result-second")
        equals = result_start - 1
        if words[equals] != "=":
            fail("equals")
        op2_spans = [s for s in spans["num2"] if s[1] <= equals]
        if not op2_spans:
            fail("op2-in-eq")
        op2_start, op2_end = op2_spans[-1]
        operator = next((i for i in range(op2_start - 1, 0, -1) if words[i] in OPERATORS), None)
        if operator is None:
            fail("operator")
        op1_spans = [s for s in spans["num1"] if s[1] <= operator]
        if not op1_spans:
            fail("op1-in-eq")

        labels = {
            "bos": 0,
            "num1-in-problem": spans["num1"][0][1] - 1,
            "num2-in-problem": spans["num2"][0][1] - 1,
            "op1-in-eq": op1_spans[-1][1] - 1,
            "operator": operator,
            "op2-in-eq": op2_end - 1,
            "equals": equals,
            "result-first": result_start,
            "result-second": result_start + 1,
            "answer-first": answer_start,
            "answer-second": answer_start + 1,
            "final": len(words) - 1,
        }
        if len(set(labels.values())) != len(labels):
            fail("final")
        return TokenLabelMap(
            template_id=template.id,
            operation=template.operation,
            length=len(words),
            labels=labels,
        )

    # ------------------------------------------------------------------
    # Pair generation
    # ------------------------------------------------------------------

    def _draw_variables(self, template: Template, n: int, seed: int) -> List[Dict]:
        """Variable assignments from a stream that does not depend on the error type"""
        operands = TemplateConfig.legal_operands(template.operation, self.max_dividend)
        lo, hi = TemplateConfig.error_range(template.operation, self.max_dividend)
        if hi <= lo:
            raise DatasetError(f"no wrong values available for {template.operation.value}")

        rng = seed_stream(seed, f"pairs/{template.key}/variables")
        names = rng.integers(0, len(TemplateConfig.NAMES), size=n)
        objects = rng.integers(0, len(TemplateConfig.OBJECTS), size=n)
        verbs_list = TemplateConfig.verbs(template.operation)
        verbs = rng.integers(0, len(verbs_list), size=n)
        pronouns = rng.integers(0, len(TemplateConfig.PRONOUNS), size=n)
        instructions = rng.integers(0, len(self.instructions()), size=n)
        picks = rng.integers(0, len(operands), size=n)

        err_rng = seed_stream(seed, f"pairs/{template.key}/errors")
        offsets = err_rng.integers(0, hi - lo, size=n)

        assignments = []
        for i in range(n):
            num1, num2 = operands[picks[i]]
            result = TemplateConfig.compute(template.operation, num1, num2)
            wrong = lo + int(offsets[i])
            if wrong >= result:
                wrong += 1
            assignments.append({
                "name": TemplateConfig.NAMES[names[i]],
                "object": TemplateConfig.OBJECTS[objects[i]],
                "verb": verbs_list[verbs[i]],
                "pronoun": TemplateConfig.PRONOUNS[pronouns[i]],
                "instruction": int(instructions[i]),
                "num1": num1,
                "num2": num2,
                "result": result,
                "wrong": wrong,
            })
        return assignments

    def _values(self, variables: Dict, shown_result: int, shown_answer: int) -> Dict[str, str]:
        return {
            "instruction": self.instructions()[variables["instruction"]],
            "name": variables["name"],
            "object": variables["object"],
            "verb": variables["verb"],
            "pronoun": variables["pronoun"],
            "num1": str(variables["num1"]),
            "num2": str(variables["num2"]),
            "result": str(shown_result),
            "answer": str(shown_answer),
        }

    def generate_pairs(
        self,
        template,
        n: int,
        error_type,
        seed: int,
        operation=None,
    ) -> List[PromptPair]:
        """n clean/corrupt pairs; the clean prompt carries the error, the corrupt prompt is correct"""
        if n < 1:
            raise DatasetError(f"n must be >= 1, got {n}")
        template = _resolve_template(template, operation)
        error_type = ErrorType(error_type)
        label_map = self.label_positions(template)

        pairs = []
        for variables in self._draw_variables(template, n, seed):
            true, wrong = variables["result"], variables["wrong"]
            shown_result = wrong if error_type in (ErrorType.RESULT, ErrorType.BOTH) else true
            shown_answer = wrong if error_type in (ErrorType.ANSWER, ErrorType.BOTH) else true
            clean = self.render(template, self._values(variables, shown_result, shown_answer))
            corrupt = self.render(template, self._values(variables, true, true))
            if len(clean.tokens) != label_map.length:
                raise DatasetError(f"template {template.key} rendered to an unexpected length")
            pairs.append(PromptPair(
                template_id=template.id,
                operation=template.operation,
                error_type=error_type,
                clean_tokens=clean.tokens,
                corrupt_tokens=corrupt.tokens,
                clean_labels=[self.tokenizer.invalid_id],
                corrupt_labels=[self.tokenizer.valid_id],
                variables={**variables, "shown_result": shown_result, "shown_answer": shown_answer},
                position_labels=label_map.labels,
            ))
        logger.debug(f"Generated {n} {error_type.value} pairs for template {template.key}")
        return pairs

    def make_computation_pairs(self, pairs: Sequence[PromptPair], seed: int) -> List[PromptPair]:
        """
        Prompts cut right after "=" and the result digits every legal result shares ("= 1" for
        addition). The corrupt prompt gets resampled legal operands with a different result of
        the same length; labels are the first result digit the two prompts disagree on, so
        5 + 8 vs 3 + 9 gives "3" vs "2".
        """
        budget = settings.COMPUTATION_RESAMPLE_BUDGET
        out = []
        streams: Dict[str, np.random.Generator] = {}
        for index, pair in enumerate(pairs):
            template = TemplateConfig.get_template(pair.template_id, pair.operation)
            rng = streams.setdefault(template.key, seed_stream(seed, f"computation/{template.key}"))
            operands = TemplateConfig.legal_operands(template.operation, self.max_dividend)
            shared = len(TemplateConfig.result_prefix(template.operation, self.max_dividend))
            variables = pair.variables
            num1, num2 = variables["num1"], variables["num2"]
            true = TemplateConfig.compute(template.operation, num1, num2)

            corrupt_operands = None
            for _ in range(budget):
                cand = operands[int(rng.integers(0, len(operands)))]
                cand_result = TemplateConfig.compute(template.operation, *cand)
                digits, true_digits = str(cand_result), str(true)
                if (
                    cand != (num1, num2)
                    and len(digits) == len(true_digits)
                    and digits[:shared] == true_digits[:shared]
                    and digits[shared] != true_digits[shared]
                ):
                    corrupt_operands = (cand, cand_result)
                    break
            if corrupt_operands is None:
                raise DatasetError(f"pair {index}: no corrupt operands with a different result after {budget} draws")
            (c1, c2), c_result = corrupt_operands

            clean = self.render(template, self._values(variables, true, true))
            corrupt_vars = {**variables, "num1": c1, "num2": c2}
            corrupt = self.render(template, self._values(corrupt_vars, c_result, c_result))
            label_map = self._label_map(template, clean)
            cut = label_map.labels["equals"] + 1 + shared
            labels = {k: v for k, v in label_map.labels.items() if v < cut and k != "final"}
            out.append(PromptPair(
                template_id=template.id,
                operation=template.operation,
                error_type=ErrorType.NONE,
                task="computation",
                clean_tokens=clean.tokens[:cut],
                corrupt_tokens=corrupt.tokens[:cut],
                clean_labels=[self.tokenizer.digit_id(str(true)[shared])],
                corrupt_labels=[self.tokenizer.digit_id(str(c_result)[shared])],
                variables={**variables, "result": true, "corrupt_num1": c1, "corrupt_num2": c2,
                           "corrupt_result": c_result},
                position_labels=labels,
            ))
        return out

    def make_computation_prompts(self, template, n: int, seed: int, operation=None) -> ComputationBatch:
        """Training prompts for the computation task over the wide operand range"""
        template = _resolve_template(template, operation)
        operands = TemplateConfig.computation_operands(template.operation, self.max_dividend)
        label_map = self.label_positions(template)
        equals = label_map.labels["equals"]
        variables = self._draw_variables(template, n, seed)
        rng = seed_stream(seed, f"computation-train/{template.key}")
        picks = rng.integers(0, len(operands), size=n)

        tokens = np.zeros((n, equals + 2), dtype=np.int64)
        targets = np.full((n, 2), -1, dtype=np.int64)
        for i, assignment in enumerate(variables):
            num1, num2 = operands[picks[i]]
            result = TemplateConfig.compute(template.operation, num1, num2)
            rendered = self.render(template, self._values({**assignment, "num1": num1, "num2": num2}, result, result))
            digits = str(result)
            tokens[i] = rendered.tokens[: equals + 2]
            targets[i, 0] = self.tokenizer.digit_id(digits[0])
            if len(digits) > 1:
                targets[i, 1] = self.tokenizer.digit_id(digits[1])
        return ComputationBatch(template.id, tokens, targets, equals)

    def split_pairs(self, pairs: Sequence[PromptPair], holdout_fraction: float, seed: int):
        """Deterministic (train, held-out) split"""
        if not 0 < holdout_fraction < 1:
            raise DatasetError(f"holdout_fraction must lie in (0, 1), got {holdout_fraction}")
        order = seed_stream(seed, "split").permutation(len(pairs))
        cut = int(round(len(pairs) * (1 - holdout_fraction)))
        return [pairs[i] for i in sorted(order[:cut])], [pairs[i] for i in sorted(order[cut:])]


# Module-level entry points over the default desk tokenizer

def generate_pairs(template, n: int, error_type, seed: int, operation=None) -> List[PromptPair]:
    return DatasetService().generate_pairs(template, n, error_type, seed, operation)


def label_positions(template, operation=None) -> TokenLabelMap:
    return DatasetService().label_positions(template, operation)


def make_computation_pairs(pairs: Sequence[PromptPair], seed: int) -> List[PromptPair]:
    return DatasetService().make_computation_pairs(pairs, seed)
