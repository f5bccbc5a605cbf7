import pytest

from kbir_forge.corpus import Document, KeyphraseUniverse, align_keyphrases
from kbir_forge.tokenizer import build_vocab


@pytest.fixture
def make_aligned():
    """Align documents under a vocabulary built from their own text and keyphrases."""

    def make(*docs, extra=()):
        vocab = build_vocab([d.text for d in docs] + [k for d in docs for k in d.keyphrases] + list(extra))
        return vocab, [align_keyphrases(d, vocab) for d in docs]

    return make


def doc(text, keyphrases=(), doc_id="d", title=""):
    return Document(doc_id, title, text, tuple(keyphrases))


def universe(phrases, vocab):
    return KeyphraseUniverse.from_phrases(phrases, vocab)
