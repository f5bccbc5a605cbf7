import pytest
from hypothesis import given, strategies as st

from kbir_forge.tokenizer import (
    BOS,
    EOS,
    KP_SEP,
    MASK,
    PAD,
    SPECIAL_TOKENS,
    UNK,
    Vocabulary,
    build_vocab,
    decode,
    encode,
    normalize,
    tokenize,
)


def test_special_ids_are_fixed():
    assert (PAD, UNK, MASK, BOS, EOS, KP_SEP) == (0, 1, 2, 3, 4, 5)
    v = build_vocab([])
    assert v.id_to_token == SPECIAL_TOKENS
    assert v.size == 6


def test_frequency_order():
    v = build_vocab(["a a b"])
    assert v.id("a") == 6 and v.id("b") == 7


def test_min_freq():
    v = build_vocab(["a a b"], min_freq=2)
    assert "a" in v and "b" not in v


def test_ties_are_lexicographic():
    v = build_vocab(["y x y x y x"])
    assert v.id("x") < v.id("y")


def test_max_size_counts_specials():
    v = build_vocab(["a a a b b c"], max_size=8)
    assert v.id_to_token[6:] == ("a", "b")


def test_min_freq_must_be_positive():
    with pytest.raises(ValueError):
        build_vocab(["a"], min_freq=0)


def test_encode_lowercases_and_maps_oov():
    v = build_vocab(["a"])
    assert encode("A a", v) == [6, 6]
    assert encode("zzz", v) == [UNK]
    assert encode("", v) == []


def test_decode():
    v = build_vocab(["a b"])
    assert decode([v.id("a"), v.id("b")], v) == "a b"
    assert decode([MASK], v) == "<mask>"
    with pytest.raises(IndexError):
        decode([v.size], v)


def test_punctuation_is_split_and_specials_never_appear():
    assert tokenize("Deep-Learning, <mask>!") == ["deep", "-", "learning", ",", "<", "mask", ">", "!"]


def test_normalize_strips_edge_punctuation():
    assert normalize("  (Neural   Networks). ") == "neural networks"
    assert normalize("...") == ""


def test_vocab_file_round_trip(tmp_path):
    v = build_vocab(["the cat sat on the mat"])
    v.save(tmp_path / "v.txt")
    lines = (tmp_path / "v.txt").read_text().splitlines()
    assert lines[: len(SPECIAL_TOKENS)] == list(SPECIAL_TOKENS)
    assert Vocabulary.load(tmp_path / "v.txt") == v


def test_vocab_rejects_bad_layout():
    with pytest.raises(ValueError):
        Vocabulary(("a",) + SPECIAL_TOKENS)


words = st.lists(st.sampled_from(["alpha", "beta", "gamma", "x1", "y_2", "z"]), max_size=30)


@given(words)
def test_round_trip_on_normalized_text(ws):
    text = " ".join(ws)
    v = build_vocab([text])
    assert decode(encode(text, v), v) == text


@given(st.lists(st.text(alphabet="aAbB ,.", max_size=12), max_size=8))
def test_build_is_order_independent(texts):
    assert build_vocab(texts) == build_vocab(list(reversed(texts)))
