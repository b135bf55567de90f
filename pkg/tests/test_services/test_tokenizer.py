# tests/test_services/test_tokenizer.py - Desk tokenizer
import pytest

from circuitlab.core.errors import TokenizerError
from circuitlab.services.tokenizer_service import Tokenizer


def test_reserved_ids(tokenizer):
    assert tokenizer.bos_id == 0
    assert tokenizer.valid_id == 1
    assert tokenizer.invalid_id == 2
    assert [tokenizer.digit_id(d) for d in range(10)] == list(range(3, 13))


def test_label_synonyms_share_ids(tokenizer):
    assert tokenizer.token_id("correct") == tokenizer.token_id("Right") == tokenizer.valid_id
    assert tokenizer.token_id("incorrect") == tokenizer.token_id("wrong") == tokenizer.invalid_id


def test_numbers_split_into_digits(tokenizer):
    ids = tokenizer.encode("mary has 14 apples.")
    assert ids[0] == tokenizer.bos_id
    assert ids[3:5] == tokenizer.number_ids(14)
    assert tokenizer.decode(ids[1:]) == "mary has 1 4 apples ."


def test_unknown_words_and_ids(tokenizer):
    with pytest.raises(TokenizerError):
        tokenizer.token_id("zeppelin")
    with pytest.raises(TokenizerError):
        tokenizer.decode([len(tokenizer)])
    with pytest.raises(TokenizerError):
        tokenizer.digit_id("12")


def test_json_round_trip(tokenizer):
    again = Tokenizer.from_json(tokenizer.to_json())
    assert again.vocab == tokenizer.vocab


def test_vocabulary_validation():
    with pytest.raises(TokenizerError):
        Tokenizer(["<bos>", "valid", "invalid", "valid"])
    with pytest.raises(TokenizerError):
        Tokenizer(["<bos>", "valid"])
