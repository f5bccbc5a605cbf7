"""Synthetic corpora with planted structure, for tests and smoke runs.

Every token is a short ascii word so that tokenization is the identity on
the generated text.
"""

from __future__ import annotations

import numpy as np

from .corpus import Document


def planted_corpus(
    n_docs: int,
    seed: int = 0,
    n_topics: int = 25,
    ctx_words: int = 4,
    slot_values: int = 3,
    kp_per_doc: int = 4,
    doc_len: tuple[int, int] = (24, 36),
) -> list[Document]:
    """Documents whose every token is predictable from its topic.

    Topic ``t`` owns context words ``t{t}c{j}`` and keyphrases of length
    ``1 + t % 3`` whose slot ``i`` holds ``t{t}k{i}v{j}``. Keyphrase tokens
    therefore live in a range disjoint from the context tokens.
    """
    rng = np.random.default_rng(seed)
    docs = []
    for d in range(n_docs):
        t = int(rng.integers(n_topics))
        length = 1 + t % 3
        n_ctx = int(rng.integers(doc_len[0], doc_len[1] + 1))
        ctx = [f"t{t}c{int(j)}" for j in rng.integers(ctx_words, size=n_ctx)]
        phrases: list[str] = []
        while len(phrases) < kp_per_doc:
            p = " ".join(f"t{t}k{i}v{int(rng.integers(slot_values))}" for i in range(length))
            if p not in phrases:
                phrases.append(p)
            if len(phrases) >= slot_values**length:
                break
        # keyphrases sit in gaps strictly inside the context run
        gaps = np.sort(rng.choice(np.arange(1, n_ctx), size=len(phrases), replace=False))
        words: list[str] = []
        prev = 0
        for g, p in zip(gaps, phrases):
            words.extend(ctx[prev:g])
            words.append(p)
            prev = g
        words.extend(ctx[prev:])
        text = " ".join(words)
        cut = 3
        split = text.split(" ")
        docs.append(Document(f"p{d}", " ".join(split[:cut]), " ".join(split[cut:]), tuple(phrases)))
    return docs


def decoy_phrases(n: int, seed: int = 0, vocab_words: int = 60, max_len: int = 3) -> list[str]:
    """Replacement phrases over a token range shared with nothing else (``rw{j}``)."""
    rng = np.random.default_rng(seed)
    out: dict[str, None] = {}
    while len(out) < n:
        k = int(rng.integers(1, max_len + 1))
        out.setdefault(" ".join(f"rw{int(j)}" for j in rng.integers(vocab_words, size=k)), None)
    return list(out)


def random_corpus(
    n_docs: int,
    seed: int = 0,
    words: int = 200,
    doc_len: tuple[int, int] = (5, 60),
    max_kp: int = 12,
    long_fraction: float = 0.05,
    heavy_fraction: float = 0.0,
) -> list[Document]:
    """Unstructured documents for rate and round-trip checks.

    Keyphrases are cut from the text itself (so they are present), with
    occasional absent phrases, overlapping picks and over-long spans.
    ``heavy_fraction`` of the documents carry many keyphrases to exercise
    the replacement cap.
    """
    rng = np.random.default_rng(seed)
    docs = []
    for d in range(n_docs):
        heavy = rng.random() < heavy_fraction
        n = int(rng.integers(doc_len[0], doc_len[1] + 1)) * (4 if heavy else 1)
        toks = [f"w{int(j)}" for j in rng.integers(words, size=n)]
        kps: list[str] = []
        n_kp = int(rng.integers(0, max_kp + 1)) * (8 if heavy else 1)
        for _ in range(n_kp):
            r = rng.random()
            if r < 0.1:
                kps.append(f"absent{int(rng.integers(1000))} phrase")
                continue
            span = 12 + int(rng.integers(4)) if r < 0.1 + long_fraction else 1 + int(rng.integers(4))
            span = min(span, n)
            s = int(rng.integers(0, n - span + 1))
            kps.append(" ".join(toks[s : s + span]))
        cut = int(rng.integers(0, min(6, n) + 1))
        docs.append(Document(f"r{d}", " ".join(toks[:cut]), " ".join(toks[cut:]), tuple(kps)))
    return docs
