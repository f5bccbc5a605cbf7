"""Corpus ingestion, keyphrase alignment and the replacement universe."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .rng import generator, splitmix64
from .tokenizer import Vocabulary, encode_tokens, normalize, tokenize

log = logging.getLogger(__name__)

REQUIRED_KEYS = ("id", "title", "abstract", "keywords")
DEFAULT_UNIVERSE_CAP = 500_000
_MAX_RESAMPLE = 100


class CorpusError(ValueError):
    """A corpus line that cannot be turned into a Document."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no
        self.message = message


class ReplacementUnavailable(LookupError):
    pass


@dataclass(frozen=True)
class Document:
    id: str
    title: str
    abstract: str
    keyphrases: tuple[str, ...] = ()

    @property
    def text(self) -> str:
        return f"{self.title} {self.abstract}"

    def to_json(self) -> dict:
        return {"id": self.id, "title": self.title, "abstract": self.abstract, "keywords": list(self.keyphrases)}


@dataclass(frozen=True)
class KeyphraseSpan:
    start: int
    end: int
    surface: str
    source_index: int

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class AlignedDocument:
    doc: Document
    tokens: tuple[int, ...]
    present_spans: tuple[KeyphraseSpan, ...]
    absent_keyphrases: tuple[str, ...]
    words: tuple[str, ...] = field(default=(), repr=False)
    dropped_keyphrases: int = 0

    @property
    def id(self) -> str:
        return self.doc.id

    def present_surfaces(self) -> list[str]:
        """Present keyphrases in order of first occurrence, deduplicated."""
        seen: dict[str, None] = {}
        for span in self.present_spans:
            seen.setdefault(span.surface, None)
        return list(seen)


def parse_document(obj: object, line_no: int = 0) -> Document:
    if not isinstance(obj, dict):
        raise CorpusError(line_no, "expected a JSON object")
    for key in REQUIRED_KEYS:
        if key not in obj:
            raise CorpusError(line_no, f"missing key {key!r}")
    doc_id, title, abstract, keywords = (obj[k] for k in REQUIRED_KEYS)
    if not isinstance(doc_id, str) or not doc_id:
        raise CorpusError(line_no, "'id' must be a non-empty string")
    if not isinstance(title, str) or not isinstance(abstract, str):
        raise CorpusError(line_no, "'title' and 'abstract' must be strings")
    if not isinstance(keywords, list) or not all(isinstance(k, str) for k in keywords):
        raise CorpusError(line_no, "'keywords' must be an array of strings")
    return Document(doc_id, title, abstract, tuple(keywords))


def load_corpus(
    path: str | Path,
    limit: int | None = None,
    lenient: bool = False,
    errors: list[CorpusError] | None = None,
) -> Iterator[Document]:
    """Stream documents from a JSONL corpus in file order.

    Malformed lines raise :class:`CorpusError`. With ``lenient`` they are
    skipped instead and appended to ``errors`` when a list is supplied.
    Duplicate ids count as malformed.
    """
    seen: set[str] = set()
    count = 0
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if limit is not None and count >= limit:
                return
            if not line.strip():
                continue
            try:
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise CorpusError(line_no, f"invalid JSON ({exc.msg})") from None
                doc = parse_document(obj, line_no)
                if doc.id in seen:
                    raise CorpusError(line_no, f"duplicate id {doc.id!r}")
            except CorpusError as err:
                if not lenient:
                    raise
                if errors is not None:
                    errors.append(err)
                continue
            seen.add(doc.id)
            count += 1
            yield doc


def write_corpus(path: str | Path, docs: Iterable[Document]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(doc.to_json(), ensure_ascii=False) + "\n")


def _occurrences(words: Sequence[str], phrase: Sequence[str]) -> Iterator[int]:
    n, k = len(words), len(phrase)
    first = phrase[0]
    for i in range(n - k + 1):
        if words[i] == first and tuple(words[i : i + k]) == phrase:
            yield i


def align_keyphrases(doc: Document, vocab: Vocabulary) -> AlignedDocument:
    """Locate each keyphrase in the title+abstract token stream.

    All occurrences of all keyphrases are candidates; they are accepted in
    order of (start, longer first, source order) whenever they do not
    overlap an accepted span. Keyphrases containing out-of-vocabulary
    words cannot round-trip through the vocabulary and are treated as absent.
    """
    words = tuple(tokenize(doc.text))
    ids = tuple(encode_tokens(words, vocab))
    dropped = 0
    phrases: list[tuple[int, str, tuple[str, ...]]] = []
    seen: set[str] = set()
    for idx, raw in enumerate(doc.keyphrases):
        surface = normalize(raw)
        if not surface or surface in seen:
            dropped += 1
            continue
        seen.add(surface)
        phrases.append((idx, surface, tuple(surface.split(" "))))

    candidates = []
    for idx, surface, toks in phrases:
        if not all(t in vocab for t in toks):
            continue
        for start in _occurrences(words, toks):
            candidates.append((start, -len(toks), idx, surface))
    candidates.sort()

    taken = np.zeros(len(words), dtype=bool)
    spans = []
    for start, neg_len, idx, surface in candidates:
        end = start - neg_len
        if taken[start:end].any():
            continue
        taken[start:end] = True
        spans.append(KeyphraseSpan(start, end, surface, idx))

    matched = {s.source_index for s in spans}
    absent = tuple(surface for idx, surface, _ in phrases if idx not in matched)
    if dropped:
        log.debug("doc %s: dropped %d empty or duplicate keyphrases", doc.id, dropped)
    return AlignedDocument(doc, ids, tuple(spans), absent, words, dropped)


@dataclass(frozen=True)
class KeyphraseUniverse:
    """Deduplicated, shuffled, capped pool of replacement phrases.

    ``token_ids`` holds the vocabulary encoding of each phrase so perturbation
    can splice replacements without a vocabulary at hand.
    """

    phrases: tuple[str, ...]
    token_ids: tuple[tuple[int, ...], ...]
    cap: int = DEFAULT_UNIVERSE_CAP
    _eligible: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.phrases) > self.cap:
            raise ValueError("universe larger than its cap")
        if len(set(self.phrases)) != len(self.phrases):
            raise ValueError("duplicate phrases in universe")
        if any(len(t) == 0 for t in self.token_ids):
            raise ValueError("every universe phrase needs at least one token")
        object.__setattr__(self, "_lengths", np.array([len(t) for t in self.token_ids], dtype=np.int64))

    def __len__(self) -> int:
        return len(self.phrases)

    @property
    def token_lengths(self) -> np.ndarray:
        return self._lengths

    def eligible(self, max_tokens: int) -> np.ndarray:
        idx = self._eligible.get(max_tokens)
        if idx is None:
            idx = np.flatnonzero(self._lengths <= max_tokens)
            self._eligible[max_tokens] = idx
        return idx

    @classmethod
    def from_phrases(cls, phrases: Iterable[str], vocab: Vocabulary, cap: int = DEFAULT_UNIVERSE_CAP) -> "KeyphraseUniverse":
        """Wrap an already ordered phrase list (normalizing, deduplicating, capping)."""
        out: dict[str, None] = {}
        for p in phrases:
            p = normalize(p)
            if p:
                out.setdefault(p, None)
        kept = list(out)[:cap]
        return cls(tuple(kept), tuple(tuple(encode_tokens(p.split(" "), vocab)) for p in kept), cap)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(p + "\n" for p in self.phrases), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, vocab: Vocabulary, cap: int = DEFAULT_UNIVERSE_CAP) -> "KeyphraseUniverse":
        lines = [ln for ln in Path(path).read_text(encoding="utf-8").split("\n") if ln]
        return cls.from_phrases(lines, vocab, cap)


def build_universe(
    docs: Iterable[AlignedDocument], vocab: Vocabulary, cap: int = DEFAULT_UNIVERSE_CAP, seed: int = 0
) -> KeyphraseUniverse:
    """Collect every tagged keyphrase (present and absent), shuffle under ``seed``, truncate to ``cap``."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    seen: dict[str, None] = {}
    for adoc in docs:
        for span in adoc.present_spans:
            seen.setdefault(span.surface, None)
        for phrase in adoc.absent_keyphrases:
            seen.setdefault(phrase, None)
    phrases = list(seen)
    order = generator(splitmix64(seed)).permutation(len(phrases))
    return KeyphraseUniverse.from_phrases((phrases[i] for i in order[:cap]), vocab, cap)


def sample_replacement(
    universe: KeyphraseUniverse, original: str, rng: np.random.Generator, max_tokens: int
) -> str:
    """Uniformly drawn universe phrase of at most ``max_tokens`` tokens, distinct from ``original``."""
    return universe.phrases[sample_replacement_index(universe, original, rng, max_tokens)]


def sample_replacement_index(
    universe: KeyphraseUniverse, original: str, rng: np.random.Generator, max_tokens: int
) -> int:
    """Index of a uniformly drawn universe phrase of at most ``max_tokens`` tokens that differs from ``original``."""
    pool = universe.eligible(max_tokens)
    if len(pool) == 0:
        raise ReplacementUnavailable(original)
    phrases = universe.phrases
    for _ in range(_MAX_RESAMPLE):
        i = int(pool[rng.integers(len(pool))])
        if phrases[i] != original:
            return i
    rest = [int(i) for i in pool if phrases[i] != original]
    if not rest:
        raise ReplacementUnavailable(original)
    return rest[int(rng.integers(len(rest)))]
