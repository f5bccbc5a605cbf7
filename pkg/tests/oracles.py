"""Brute-force references, written independently of the package internals."""

from __future__ import annotations

import itertools
import math

import numpy as np


# -- CRF ------------------------------------------------------------------
def crf_paths(n: int, k: int = 3):
    return itertools.product(range(k), repeat=n)


def crf_path_score(em, trans, start, stop, path) -> float:
    s = start[path[0]] + stop[path[-1]]
    for i, t in enumerate(path):
        s += em[i][t]
    for a, b in zip(path, path[1:]):
        s += trans[a][b]
    return float(s)


def crf_log_partition(em, trans, start, stop) -> float:
    scores = [crf_path_score(em, trans, start, stop, p) for p in crf_paths(len(em), len(start))]
    m = max(scores)
    return m + math.log(sum(math.exp(s - m) for s in scores))


def crf_argmax(em, trans, start, stop) -> list[int]:
    best, best_path = -math.inf, None
    for p in crf_paths(len(em), len(start)):
        s = crf_path_score(em, trans, start, stop, p)
        if s > best:
            best, best_path = s, p
    return list(best_path)


# -- keyphrase generation metrics ----------------------------------------
def _harmonic(p: float, r: float) -> float:
    if p + r == 0:
        return 0.0
    return 2 * p * r / (p + r)


def f1_at_k(preds: list[str], gold: list[str], k: int | None, pad: bool) -> float:
    """k=None scores every prediction; ``pad`` appends never-matching phrases up to k."""
    top = list(preds if k is None else preds[:k])
    if pad and k is not None:
        while len(top) < k:
            top.append(object())  # never equal to a gold string
    hits = 0
    for g in gold:
        for p in top:
            if p == g:
                hits += 1
                break
    precision = hits / len(top) if top else 0.0
    recall = hits / len(gold)
    return _harmonic(precision, recall)


def f1_at_m_fixed5(preds: list[str], gold: list[str]) -> float:
    """F1@M with the precision denominator forced to 5."""
    hits = sum(1 for g in gold if g in preds)
    return _harmonic(hits / 5, hits / len(gold))


def contiguous(phrase: str, words: list[str]) -> bool:
    toks = phrase.split()
    for i in range(len(words)):
        if words[i : i + len(toks)] == toks:
            return True
    return False


def macro(values: list[float]):
    if not values:
        return None
    acc = 0.0
    for v in values:
        acc += v
    return acc / len(values)


def report(docs):
    """(preds, gold, words) triples -> {split: (f1@5, f1@M, scored, skipped)}."""
    out = {}
    for split, want in (("present", True), ("absent", False)):
        f5, fm, skipped = [], [], 0
        for preds, gold, words in docs:
            p = [x for x in preds if contiguous(x, words) == want]
            g = [x for x in gold if contiguous(x, words) == want]
            if not g:
                skipped += 1
                continue
            f5.append(f1_at_k(p, g, 5, pad=True))
            fm.append(f1_at_k(p, g, None, pad=False))
        out[split] = (macro(f5), macro(fm), len(f5), skipped)
    return out


# -- BIO ------------------------------------------------------------------
def bio_phrases(tags: list[str]) -> set[tuple[int, int]]:
    out = set()
    i = 0
    while i < len(tags):
        if tags[i] in ("B", "I"):
            j = i + 1
            while j < len(tags) and tags[j] == "I":
                j += 1
            out.add((i, j))
            i = j
        else:
            i += 1
    return out


# -- model heads from encoder states --------------------------------------
def _ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))


def _nll(logits, target):
    m = logits.max()
    return -(logits[target] - m - np.log(np.exp(logits - m).sum()))


def head_losses(params: dict, enc: np.ndarray, ex) -> dict[str, float]:
    """MLM, infill, length and KRC losses recomputed in plain numpy."""
    emb, bias = params["tok_emb"], params["lm_bias"]
    out = {}
    out["mlm"] = float(np.mean([_nll(enc[r.position] @ emb.T + bias, r.original_id) for r in ex.mlm])) if ex.mlm else 0.0
    if ex.infill:
        per = []
        for r in ex.infill:
            vals = []
            for i, tok in enumerate(r.original_tokens):
                z = np.concatenate([enc[r.mask_position - 1], enc[r.mask_position + 1], params["infill.pos"][i]])
                h = _ln(_gelu(z @ params["infill.w1"] + params["infill.b1"]), params["infill.ln1.g"], params["infill.ln1.b"])
                y = _ln(_gelu(h @ params["infill.w2"] + params["infill.b2"]), params["infill.ln2.g"], params["infill.ln2.b"])
                vals.append(_nll(y @ emb.T + bias, tok))
            per.append(np.mean(vals))
        out["infill"] = float(np.mean(per))
        out["length"] = float(
            np.mean([_nll(enc[r.mask_position] @ params["length.w"] + params["length.b"], len(r.original_tokens) - 1)
                     for r in ex.infill])
        )
    else:
        out["infill"] = out["length"] = 0.0
    if ex.krc:
        vals = []
        for r in ex.krc:
            z = np.concatenate([enc[r.span_start - 1], enc[r.span_end]]) @ params["krc.w"] + params["krc.b"]
            z = float(np.ravel(z)[0])
            vals.append(math.log1p(math.exp(-z)) if r.label else math.log1p(math.exp(z)))
        out["krc"] = float(np.mean(vals))
    else:
        out["krc"] = 0.0
    return out
