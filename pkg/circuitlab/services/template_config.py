# circuitlab/services/template_config.py - Problem templates, variable lists and numeric ranges
import itertools
import os
from dataclasses import dataclass
from typing import Dict, List, Tuple

from circuitlab.core.config import settings
from circuitlab.core.errors import DatasetError
from circuitlab.schemas.dataset import Operation

ANSWER_SENTENCE = "Answer: The above reasoning is"


@dataclass(frozen=True)
class Template:
    id: int
    operation: Operation
    text: str

    @property
    def key(self) -> str:
        return f"{self.operation.value}/{self.id}"


class TemplateConfig:
    """Desk vocabulary and the 8 templates of every operation"""

    NAMES = [
        "aaron", "adam", "alice", "amy", "anna", "brian", "daniel", "david",
        "emily", "eric", "frank", "george", "jane", "john", "kate", "lisa", "mary", "mark",
    ]
    OBJECTS = [
        "apples", "bananas", "oranges", "grapes", "pears", "books", "pens", "flowers",
        "candies", "toys", "tickets", "hats", "keys", "mugs", "plates", "candles",
    ]
    PRONOUNS = ["he", "she"]
    VERBS = {
        Operation.ADD: [
            "won", "bought", "received", "gained", "obtained", "earned",
            "acquired", "collected", "gathered", "got",
        ],
        Operation.SUB: ["lost", "sold", "donated", "dropped", "spent", "used"],
    }
    CORRECT_PAIRS = ["valid or invalid", "correct or incorrect", "right or wrong"]
    INSTRUCTIONS = [
        "Does the following reasoning chain contain any mistakes? Determine whether it is {pair}.",
        "Does the reasoning chain provided have any errors? Decide whether it is {pair}.",
        "Does the given reasoning chain contain any flaws? Evaluate whether it is {pair}.",
        "Does the reasoning chain shown have any errors? Verify whether it is {pair}.",
        "Does the reasoning chain below have any mistakes? Check if it is {pair}.",
        "Does the following reasoning chain have any errors? Specify whether it is {pair}.",
        "Does the provided reasoning chain contain any flaws? Assess if it is {pair}.",
        "Does the reasoning chain presented have any issues? Judge whether it is {pair}.",
        "Does the reasoning chain contain any mistakes? Examine if it is {pair}.",
        "Does the reasoning chain have any errors? Inspect it and determine if it is {pair}.",
        "Does the reasoning chain have any flaws? Review it and confirm if it is {pair}.",
        "Does the given reasoning chain contain any issues? Analyze it and decide if it is {pair}.",
    ]
    OPERATOR_SYMBOLS = {
        Operation.ADD: "+",
        Operation.SUB: "-",
        Operation.MUL: "×",
        Operation.DIV: "÷",
    }

    TEMPLATES: Dict[Operation, List[str]] = {
        Operation.ADD: [
            "[instruction] Problem: [name] has [num1] [object]. [pronoun] [verb] [num2] more [object]. How many [object] does [pronoun] have now? Reasoning: [name] has [num1] + [num2] = [num3] [object]. So, [pronoun] has [num3] [object] in total.",
            "[instruction] Problem: [name] starts with [num1] [object]. After [pronoun] [verb] [num2] more, how many [object] does [pronoun] have in total? Reasoning: To solve this, we add [num1] and [num2]: [num1] + [num2] = [num3]. Therefore, [name] now has [num3] [object].",
            "[instruction] Problem: Initially, [name] possesses [num1] [object]. [pronoun] then [verb] [num2] additional [object]. What's the new total amount of [object] that [pronoun] has? Reasoning: We calculate: [num1] (original) + [num2] (added) = [num3] (total). So, [name] now has [num3] [object].",
            "[instruction] Problem: [name]'s collection of [object] grows from [num1] to an unknown amount after [pronoun] [verb] [num2] more. Reasoning: To find the new total, we add: [num1] + [num2] = [num3] (final amount). Thus, [name] ends up with [num3] [object].",
            "[instruction] Problem: [name] originally owns [num1] [object]. After [pronoun] [verb] [num2] additional [object], how many does [pronoun] have altogether? Reasoning: a simple addition gives us [num1] + [num2] = [num3]. Therefore, [name] has [num3] [object] now.",
            "[instruction] Problem: [name] possesses [num1] [object] at first. If [pronoun] [verb] [num2] more [object], what is the total count? Reasoning: Adding them gives: [num1] + [num2] = [num3]. Consequently, [name] has a total of [num3] [object].",
            "[instruction] Problem: [num1] [object] belong to [name]. [pronoun] [verb] [num2] additional ones. What's the total? Reasoning: By addition, we get [num1] + [num2] = [num3]. Thus, [name] has [num3] [object] in total.",
            "[instruction] Problem: [name] begins with [num1] [object] and then [verb] [num2] more. How many [object] does [pronoun] have now? Reasoning: Let's add them up: [num1] + [num2] = [num3]. Therefore, [name] has a total of [num3] [object].",
        ],
        Operation.SUB: [
            "[instruction] Problem: [name] has [num1] [object]. [pronoun] [verb] [num2] [object]. How many [object] does [pronoun] have now? Reasoning: [name] has [num1] - [num2] = [num3] [object]. So, [pronoun] has [num3] [object] remaining.",
            "[instruction] Problem: [name] starts with [num1] [object]. After [pronoun] [verb] [num2], how many [object] does [pronoun] have left? Reasoning: To solve this, we subtract [num2] from [num1]: [num1] - [num2] = [num3]. Therefore, [name] now has [num3] [object].",
            "[instruction] Problem: Initially, [name] possesses [num1] [object]. [pronoun] then [verb] [num2] [object]. What's the remaining amount of [object] that [pronoun] has? Reasoning: We calculate: [num1] (original) - [num2] (removed) = [num3] (remaining). So, [name] now has [num3] [object].",
            "[instruction] Problem: [name]'s collection of [object] decreases from [num1] to an unknown amount after [pronoun] [verb] [num2] [object]. Reasoning: To find the remaining total, we subtract: [num1] - [num2] = [num3] (final amount). Thus, [name] ends up with [num3] [object].",
            "[instruction] Problem: [name] originally owns [num1] [object]. After [pronoun] [verb] [num2] [object], how many does [pronoun] have left? Reasoning: A simple subtraction gives us [num1] - [num2] = [num3]. Therefore, [name] has [num3] [object] remaining.",
            "[instruction] Problem: [name] possesses [num1] [object] at first. If [pronoun] [verb] [num2] [object], what is the remaining count? Reasoning: Subtracting them gives: [num1] - [num2] = [num3]. Consequently, [name] has [num3] [object] left.",
            "[instruction] Problem: [num1] [object] belong to [name]. [pronoun] [verb] [num2] of them. What's the remainder? Reasoning: By subtraction, we get [num1] - [num2] = [num3]. Thus, [name] has [num3] [object] remaining.",
            "[instruction] Problem: [name] begins with [num1] [object] and then [verb] [num2] of them. How many [object] does [pronoun] have left? Reasoning: Let's subtract them: [num1] - [num2] = [num3]. Therefore, [name] has [num3] [object] remaining.",
        ],
        Operation.MUL: [
            "[instruction] Problem: [name] has [num1] [object] per day. After [num2] days, how many [object] does [pronoun] have in total? Reasoning: [name] has [num1] × [num2] = [num3] [object]. So, [pronoun] has [num3] [object] in total.",
            "[instruction] Problem: [name] buys [num1] [object] each time [pronoun] goes shopping. If [pronoun] goes shopping [num2] times, how many [object] does [pronoun] buy in total? Reasoning: To solve this, we multiply [num1] and [num2]: [num1] × [num2] = [num3]. Therefore, [name] buys [num3] [object] in total.",
            "[instruction] Problem: [name] collects [num1] [object] each week. After [num2] weeks, how many [object] has [pronoun] collected altogether? Reasoning: We calculate: [num1] (per week) × [num2] (weeks) = [num3] (total). So, [pronoun] has collected [num3] [object] altogether.",
            "[instruction] Problem: Initially, [name] receives [num1] [object] each month. After [num2] months, what's the total amount of [object] that [pronoun] has received? Reasoning: We calculate: [num1] (per month) × [num2] (months) = [num3] (total). So, [name] has received [num3] [object].",
            "[instruction] Problem: [name] originally gets [num1] [object] per visit. After [num2] visits, how many [object] has [pronoun] gotten altogether? Reasoning: A simple multiplication gives us [num1] × [num2] = [num3]. Therefore, [name] has gotten [num3] [object] in total.",
            "[instruction] Problem: [name] earns [num1] [object] per task at first. If [pronoun] completes [num2] tasks, what is the total count of [object]? Reasoning: Multiplying them gives: [num1] × [num2] = [num3]. Consequently, [pronoun] earns [num3] [object] in total.",
            "[instruction] Problem: [name] finds [num1] [object] each time [pronoun] searches. After [num2] searches, what's the total? Reasoning: By multiplication, we get [num1] × [num2] = [num3]. Thus, [name] finds [num3] [object] in total.",
            "[instruction] Problem: [name] produces [num1] [object] per session and then has [num2] sessions. How many [object] are there in total? Reasoning: Let's multiply them: [num1] × [num2] = [num3]. Therefore, there are [num3] [object] altogether.",
        ],
        Operation.DIV: [
            "[instruction] Problem: [name] has [num1] [object]. [pronoun] wants to organize them into equal groups of [num2] [object] each. How many groups can [pronoun] make? Reasoning: [name] can make [num1] ÷ [num2] = [num3] groups. So, [pronoun] can make [num3] groups.",
            "[instruction] Problem: [name] starts with [num1] [object]. If [pronoun] puts [num2] [object] in each container, how many containers can [pronoun] fill? Reasoning: To solve this, we divide [num1] by [num2]: [num1] ÷ [num2] = [num3]. Therefore, [name] can fill [num3] containers.",
            "[instruction] Problem: [name] has [num1] [object] to share equally. If each person gets [num2] [object], how many people can receive [object]? Reasoning: We calculate: [num1] (total) ÷ [num2] (per person) = [num3] (people). So, [num3] people can receive [object].",
            "[instruction] Problem: Initially, [name] possesses [num1] [object]. [pronoun] wants to arrange them in rows with [num2] [object] per row. What's the total number of rows that can be formed? Reasoning: We calculate: [num1] (total) ÷ [num2] (per row) = [num3] (rows). So, [name] can form [num3] rows.",
            "[instruction] Problem: [name] originally owns [num1] [object]. If [pronoun] distributes [num2] [object] to each recipient, how many recipients can get [object]? Reasoning: A simple division gives us [num1] ÷ [num2] = [num3]. Therefore, [num3] recipients can get [object].",
            "[instruction] Problem: [name] possesses [num1] [object] at first. If [pronoun] arranges [num2] [object] in each pile, what is the total number of piles? Reasoning: Dividing them gives: [num1] ÷ [num2] = [num3]. Consequently, [name] can make [num3] piles.",
            "[instruction] Problem: [num1] [object] belong to [name]. [pronoun] places [num2] [object] in each box. What's the total number of boxes needed? Reasoning: By division, we get [num1] ÷ [num2] = [num3]. Thus, [name] needs [num3] boxes.",
            "[instruction] Problem: [name] begins with [num1] [object] and then organizes [num2] [object] per shelf. How many shelves does [pronoun] need? Reasoning: Let's divide them: [num1] ÷ [num2] = [num3]. Therefore, [name] needs [num3] shelves.",
        ],
    }

    @classmethod
    def get_template(cls, template_id: int, operation="add") -> Template:
        operation = Operation(operation)
        if not 1 <= template_id <= len(cls.TEMPLATES[operation]):
            raise DatasetError(f"no template {template_id} for operation {operation.value}")
        text = f"{cls.TEMPLATES[operation][template_id - 1]} {ANSWER_SENTENCE}"
        return Template(template_id, operation, text)

    @classmethod
    def all_templates(cls, operation=None) -> List[Template]:
        operations = [Operation(operation)] if operation else list(Operation)
        return [
            cls.get_template(i + 1, op)
            for op in operations
            for i in range(len(cls.TEMPLATES[op]))
        ]

    @classmethod
    def verbs(cls, operation) -> List[str]:
        return cls.VERBS.get(Operation(operation), cls.VERBS[Operation.ADD])

    @staticmethod
    def compute(operation, num1: int, num2: int) -> int:
        operation = Operation(operation)
        if operation == Operation.ADD:
            return num1 + num2
        if operation == Operation.SUB:
            return num1 - num2
        if operation == Operation.MUL:
            return num1 * num2
        if num1 % num2:
            raise DatasetError(f"{num1} is not divisible by {num2}")
        return num1 // num2

    @classmethod
    def legal_operands(cls, operation, max_dividend: int = None) -> List[Tuple[int, int]]:
        """Operand pairs of the validation task: fixed digit counts, two-digit result"""
        operation = Operation(operation)
        max_dividend = max_dividend or settings.DIVISION_MAX_DIVIDEND
        if operation == Operation.ADD:
            combos = [(a, b) for a, b in itertools.product(range(1, 10), repeat=2) if a + b >= 10]
        elif operation == Operation.SUB:
            combos = [(a, b) for a in range(10, 100) for b in range(1, 10) if a - b >= 10]
        elif operation == Operation.MUL:
            combos = [(a, b) for a, b in itertools.product(range(1, 10), repeat=2) if a * b >= 10]
        else:
            combos = [
                (q * b, b) for b in range(2, 10) for q in range(10, 100)
                if 10 <= q * b <= min(max_dividend, 99)
            ]
        if not combos:
            raise DatasetError(f"no legal operands for {operation.value} (max_dividend={max_dividend})")
        return combos

    @classmethod
    def computation_operands(cls, operation, max_dividend: int = None) -> List[Tuple[int, int]]:
        """Operand pairs with the same digit counts as `legal_operands` but any result size"""
        operation = Operation(operation)
        max_dividend = max_dividend or settings.DIVISION_MAX_DIVIDEND
        if operation in (Operation.ADD, Operation.MUL):
            return list(itertools.product(range(1, 10), repeat=2))
        if operation == Operation.SUB:
            return [(a, b) for a in range(10, 100) for b in range(1, 10)]
        return [
            (a, b) for b in range(2, 10) for a in range(10, min(max_dividend, 99) + 1) if a % b == 0
        ]

    @classmethod
    def result_range(cls, operation, max_dividend: int = None) -> Tuple[int, int]:
        results = [cls.compute(operation, a, b) for a, b in cls.legal_operands(operation, max_dividend)]
        return min(results), max(results)

    # Wrong values shown in error prompts, inclusive; other operations use their result range
    ERROR_RANGES = {Operation.ADD: (10, 19)}

    @classmethod
    def error_range(cls, operation, max_dividend: int = None) -> Tuple[int, int]:
        operation = Operation(operation)
        if operation in cls.ERROR_RANGES:
            return cls.ERROR_RANGES[operation]
        return cls.result_range(operation, max_dividend)

    @classmethod
    def result_prefix(cls, operation, max_dividend: int = None) -> str:
        """Leading digits shared by every legal result ("1" for addition)"""
        results = [str(cls.compute(operation, a, b)) for a, b in cls.legal_operands(operation, max_dividend)]
        return os.path.commonprefix(results)[:min(len(r) for r in results) - 1]
