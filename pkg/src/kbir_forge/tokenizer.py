"""Word-level vocabulary, encoding and phrase normalization."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, UNK, MASK, BOS, EOS, KP_SEP = range(6)
SPECIAL_TOKENS = ("<pad>", "<unk>", "<mask>", "<bos>", "<eos>", "<kp_sep>")
N_SPECIAL = len(SPECIAL_TOKENS)

# words, or single punctuation characters; "<" and ">" always split, so the
# angle-bracket special names can never come out of natural text
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
_PUNCT_RE = re.compile(r"^[^\w\s]$")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace, peeling punctuation into its own tokens."""
    return _TOKEN_RE.findall(text.lower())


def normalize(text: str) -> str:
    """Canonical phrase form used for every identity test.

    Lowercased, tokenized, single-space joined, with leading and trailing
    punctuation tokens dropped.
    """
    toks = tokenize(text)
    lo, hi = 0, len(toks)
    while lo < hi and _PUNCT_RE.match(toks[lo]):
        lo += 1
    while hi > lo and _PUNCT_RE.match(toks[hi - 1]):
        hi -= 1
    return " ".join(toks[lo:hi])


@dataclass(frozen=True)
class Vocabulary:
    id_to_token: tuple[str, ...]
    min_freq: int = 1
    token_to_id: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.id_to_token[:N_SPECIAL]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the special tokens")
        mapping = {t: i for i, t in enumerate(self.id_to_token)}
        if len(mapping) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        object.__setattr__(self, "token_to_id", mapping)

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.id_to_token), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(tuple(lines))


def build_vocab(texts: Iterable[str], min_freq: int = 1, max_size: int | None = None) -> Vocabulary:
    """Frequency-ranked vocabulary; ties broken lexicographically.

    ``max_size`` bounds the total size, specials included.
    """
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts: Counter[str] = Counter()
    for text in texts:
        counts.update(tokenize(text))
    ranked = sorted((t for t, c in counts.items() if c >= min_freq), key=lambda t: (-counts[t], t))
    if max_size is not None:
        ranked = ranked[: max(0, max_size - N_SPECIAL)]
    return Vocabulary(SPECIAL_TOKENS + tuple(ranked), min_freq=min_freq)


def encode(text: str, vocab: Vocabulary) -> list[int]:
    return [vocab.id(t) for t in tokenize(text)]


def encode_tokens(tokens: Sequence[str], vocab: Vocabulary) -> list[int]:
    return [vocab.id(t) for t in tokens]


def decode(ids: Sequence[int], vocab: Vocabulary) -> str:
    size = vocab.size
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < size:
            raise IndexError(f"token id {i} out of range for vocabulary of size {size}")
        out.append(vocab.id_to_token[i])
    return " ".join(out)
