# circuitlab/services/tokenizer_service.py - Word-level desk tokenizer with one token per digit
import logging
import re
from functools import lru_cache
from typing import Dict, Iterable, List, Sequence

from circuitlab.core.errors import TokenizerError
from circuitlab.services.template_config import TemplateConfig

logger = logging.getLogger(__name__)

TOKEN_PATTERN = re.compile(r"'s|\d|[^\W\d]+|[^\w\s]")
PLACEHOLDER = re.compile(r"\[(?:instruction|name|object|verb|pronoun|num1|num2|num3)\]")

BOS = "<bos>"
VALID = "valid"
INVALID = "invalid"
SYNONYMS = {
    "correct": VALID,
    "right": VALID,
    "incorrect": INVALID,
    "wrong": INVALID,
}


class Tokenizer:
    """Lower-cased word-level vocabulary; label synonyms share the VALID/INVALID ids"""

    def __init__(self, vocab: Sequence[str]):
        if len(set(vocab)) != len(vocab):
            raise TokenizerError("vocabulary contains duplicate entries")
        if BOS not in vocab or VALID not in vocab or INVALID not in vocab:
            raise TokenizerError("vocabulary must contain <bos>, valid and invalid")
        self.vocab: List[str] = list(vocab)
        self._ids: Dict[str, int] = {tok: i for i, tok in enumerate(self.vocab)}

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Tokenizer":
        words = set()
        for text in texts:
            words.update(cls.split(PLACEHOLDER.sub(" ", text)))
        words -= set(SYNONYMS)
        words -= {BOS, VALID, INVALID}
        digits = [str(d) for d in range(10)]
        rest = sorted(words - set(digits))
        return cls([BOS, VALID, INVALID] + digits + rest)

    @staticmethod
    def split(text: str) -> List[str]:
        return TOKEN_PATTERN.findall(text.replace("’", "'").lower())

    def __len__(self) -> int:
        return len(self.vocab)

    def token_id(self, word: str) -> int:
        word = SYNONYMS.get(word.lower(), word.lower())
        if word not in self._ids:
            raise TokenizerError(f"unknown token {word!r}")
        return self._ids[word]

    def encode(self, text: str, bos: bool = True) -> List[int]:
        ids = [self.token_id(w) for w in self.split(text)]
        return [self._ids[BOS]] + ids if bos else ids

    def decode(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            if not 0 <= int(i) < len(self.vocab):
                raise TokenizerError(f"token id {i} out of range")
            words.append(self.vocab[int(i)])
        return " ".join(words)

    @property
    def bos_id(self) -> int:
        return self._ids[BOS]

    @property
    def valid_id(self) -> int:
        return self._ids[VALID]

    @property
    def invalid_id(self) -> int:
        return self._ids[INVALID]

    def digit_id(self, digit) -> int:
        text = str(digit)
        if len(text) != 1 or not text.isdigit():
            raise TokenizerError(f"not a single digit: {digit!r}")
        return self._ids[text]

    def number_ids(self, value: int) -> List[int]:
        return [self.digit_id(d) for d in str(value)]

    def to_json(self) -> Dict:
        return {"vocab": self.vocab, "synonyms": SYNONYMS}

    @classmethod
    def from_json(cls, payload: Dict) -> "Tokenizer":
        return cls(payload["vocab"])


def desk_corpus() -> List[str]:
    """Every text the desk tokenizer must cover"""
    texts = [t.text for t in TemplateConfig.all_templates()]
    texts.extend(
        instruction.format(pair=pair)
        for instruction in TemplateConfig.INSTRUCTIONS
        for pair in TemplateConfig.CORRECT_PAIRS
    )
    texts.extend(TemplateConfig.NAMES + TemplateConfig.OBJECTS + TemplateConfig.PRONOUNS)
    for verbs in TemplateConfig.VERBS.values():
        texts.extend(verbs)
    texts.extend(TemplateConfig.OPERATOR_SYMBOLS.values())
    return texts


@lru_cache(maxsize=1)
def get_tokenizer() -> Tokenizer:
    tokenizer = Tokenizer.build(desk_corpus())
    logger.debug(f"Desk tokenizer built with {len(tokenizer)} tokens")
    return tokenizer
