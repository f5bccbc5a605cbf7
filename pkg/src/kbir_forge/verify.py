"""Finite-difference checks of the full losses and of each tensor primitive."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .corpus import KeyphraseUniverse, align_keyphrases
from .model import (
    Model,
    ModelConfig,
    crf_log_likelihood,
    loss_kbir,
    loss_seq2seq,
)
from .perturb import PerturbationConfig, perturb_keybart_pair, perturb_kbir
from .synthetic import decoy_phrases, planted_corpus
from .tokenizer import build_vocab
from .train import bio_tags

FULL_TOLERANCE = 1e-4
PRIMITIVE_TOLERANCE = 1e-6


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= self.tolerance


def _jitter(model: Model, scale: float, seed: int) -> None:
    # move gains/biases off their 1/0 init so their gradients are exercised
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.data = p.data + rng.normal(0.0, scale, p.data.shape)


class Fixture:
    """A short planted document set, perturbed so every loss component is active."""

    def __init__(self, seed: int = 0):
        docs = planted_corpus(12, seed=seed, n_topics=3, kp_per_doc=2, doc_len=(6, 8))
        decoys = decoy_phrases(20, seed=seed, vocab_words=8)
        self.vocab = build_vocab([d.text for d in docs] + decoys)
        self.docs = [align_keyphrases(d, self.vocab) for d in docs]
        self.universe = KeyphraseUniverse.from_phrases(decoys, self.vocab)
        self.pcfg = PerturbationConfig(p_mlm=0.2, p_kp_mask=0.4, p_kp_replace=0.6, seed=seed)
        for epoch in range(100):
            for d in self.docs:
                ex = perturb_kbir(d, self.pcfg, self.universe, epoch=epoch)
                if ex.mlm and ex.infill and ex.krc:
                    self.kbir_example, self.doc = ex, d
                    break
            else:
                continue
            break
        else:
            raise RuntimeError("no fixture document exercises every component")
        self.pair = perturb_keybart_pair(self.doc, self.pcfg, self.universe, "keyphrases")

    def model(self, kind: str, d_model: int = 16, layers: int = 2, heads: int = 2, seed: int = 0) -> Model:
        cfg = ModelConfig(
            vocab_size=self.vocab.size, d_model=d_model, n_layers=layers, n_heads=heads,
            max_seq_len=32, kind=kind, init_seed=seed,
        )
        m = Model(cfg)
        _jitter(m, 0.1, seed + 1)
        return m


def _timed(name: str, tol: float, fn: Callable[[], float]) -> CheckResult:
    t = time.perf_counter()
    err = fn()
    return CheckResult(name, err, tol, time.perf_counter() - t)


def check_objective(
    objective: str, d_model: int = 16, layers: int = 2, heads: int = 2, coords: int = 24, seed: int = 0
) -> CheckResult:
    """Full-loss gradient check for ``kbir`` (and its ablations), ``keybart`` or ``crf``."""
    fx = Fixture(seed)
    if objective in ("kbir", "kbi", "mlm"):
        from .model import KBI_WEIGHTS, KBIR_WEIGHTS, MLM_WEIGHTS

        w = {"kbir": KBIR_WEIGHTS, "kbi": KBI_WEIGHTS, "mlm": MLM_WEIGHTS}[objective]
        m = fx.model("encoder", d_model, layers, heads, seed)
        ex = fx.kbir_example
        f = lambda: loss_kbir(m, ex, w)  # noqa: E731
    elif objective in ("keybart", "keybart-doc", "finetune-kg"):
        m = fx.model("seq2seq", d_model, layers, heads, seed)
        pair = fx.pair
        f = lambda: loss_seq2seq(m, pair)  # noqa: E731
    elif objective in ("crf", "finetune-ke"):
        m = fx.model("encoder", d_model, layers, heads, seed)
        ids, tags = list(fx.doc.tokens), bio_tags(fx.doc)
        f = lambda: crf_log_likelihood(m, m.encode(ids), tags)  # noqa: E731
    else:
        raise ValueError(f"no gradient check for objective {objective!r}")
    return _timed(objective, FULL_TOLERANCE, lambda: T.grad_check(f, m.parameters(), coords=coords, seed=seed))


def _primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[..., T.Tensor], list[np.ndarray]]]:
    def r(*shape):
        return rng.normal(size=shape)

    def scalar(t: T.Tensor) -> T.Tensor:
        # random projection to a scalar so every output coordinate matters
        w = np.random.default_rng(99).normal(size=t.shape)
        return T.tsum(T.mul(t, T.Tensor(w)))

    tgt = [1, 0, 3]
    return {
        "add": (lambda a, b: scalar(T.add(a, b)), [r(3, 4), r(4)]),
        "neg": (lambda a: scalar(T.neg(a)), [r(3, 4)]),
        "mul": (lambda a, b: scalar(T.mul(a, b)), [r(3, 4), r(3, 1)]),
        "gelu": (lambda a: scalar(T.gelu(a)), [r(3, 4)]),
        "reshape": (lambda a: scalar(T.reshape(a, (4, 3))), [r(3, 4)]),
        "transpose": (lambda a: scalar(T.transpose(a, (2, 0, 1))), [r(2, 3, 4)]),
        "index": (lambda a: scalar(T.index(a, [2, 0, 2])), [r(3, 4)]),
        "concat": (lambda a, b: scalar(T.concat([a, b], axis=1)), [r(3, 2), r(3, 4)]),
        "sum": (lambda a: scalar(T.tsum(a, axis=0, keepdims=True)), [r(3, 4)]),
        "mean": (lambda a: scalar(T.mean(a, axis=1)), [r(3, 4)]),
        "logsumexp": (lambda a: scalar(T.logsumexp(a, axis=-1)), [r(3, 4)]),
        "matmul": (lambda a, b: scalar(T.matmul(a, b)), [r(2, 3, 4), r(4, 5)]),
        "softmax": (lambda a: scalar(T.softmax(a, axis=-1)), [r(3, 4)]),
        "layer_norm": (lambda x, g, b: scalar(T.layer_norm(x, g, b)), [r(3, 4), r(4), r(4)]),
        "softmax_cross_entropy": (lambda a: T.softmax_cross_entropy(a, tgt), [r(3, 5)]),
        "weighted_cross_entropy": (lambda a: T.softmax_cross_entropy(a, tgt, [0.5, 0.2, 0.3]), [r(3, 5)]),
        "bce_with_logits": (lambda a: T.bce_with_logits(a, [1.0, 0.0, 1.0]), [r(3) * 3]),
    }


def check_primitives(seed: int = 0) -> list[CheckResult]:
    out = []
    for name, (fn, arrays) in _primitive_cases(np.random.default_rng(seed)).items():
        params = [T.Parameter(f"{name}.{i}", a) for i, a in enumerate(arrays)]
        out.append(
            _timed(name, PRIMITIVE_TOLERANCE, lambda: T.grad_check(lambda: fn(*params), params, h=1e-5, coords=64))
        )
    return out
