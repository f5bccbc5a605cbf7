"""Keyphrase generation and extraction metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .tokenizer import BOS, EOS, KP_SEP, SPECIAL_TOKENS, Vocabulary, normalize

SPLITS = ("present", "absent")
TAG_B, TAG_I, TAG_O = 0, 1, 2
TAG_NAMES = ("B", "I", "O")

# phrase -> matching key; identity unless a stemmer is plugged in
Matcher = Callable[[str], str]


def exact(phrase: str) -> str:
    return phrase


def parse_catseq(seq: str | Sequence[int], vocab: Vocabulary | None = None) -> list[str]:
    """Ordered, deduplicated phrases from a CatSeq string or id sequence."""
    if isinstance(seq, str):
        words = seq.split()
    else:
        if vocab is None:
            raise ValueError("id sequences need a vocabulary")
        words = [vocab.id_to_token[int(i)] for i in seq]
    sep, drop = SPECIAL_TOKENS[KP_SEP], {SPECIAL_TOKENS[BOS], SPECIAL_TOKENS[EOS]}
    out: list[str] = []
    cur: list[str] = []
    for w in words + [sep]:
        if w == sep:
            p = normalize(" ".join(cur))
            if p and p not in out:
                out.append(p)
            cur = []
        elif w not in drop:
            cur.append(w)
    return out


def _occurs(needle: list[str], hay: Sequence[str]) -> bool:
    n = len(needle)
    if n == 0:
        return False
    return any(list(hay[i : i + n]) == needle for i in range(len(hay) - n + 1))


def split_present_absent(phrases: Sequence[str], source_tokens: Sequence[str]) -> tuple[list[str], list[str]]:
    present, absent = [], []
    for p in phrases:
        (present if _occurs(p.split(), source_tokens) else absent).append(p)
    return present, absent


@dataclass(frozen=True)
class DocScore:
    f1_at_5: float
    f1_at_m: float
    p_at_5: float
    r_at_5: float
    p_at_m: float
    r_at_m: float
    matched_at_5: int
    matched_at_m: int
    n_preds: int
    n_gold: int


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def score_document(preds: Sequence[str], gold: Sequence[str], matcher: Matcher = exact) -> DocScore:
    """F1@5 with a fixed precision denominator of 5, and F1@M over all predictions."""
    if not gold:
        raise ValueError("gold must be non-empty; skip such documents before scoring")

    def matched(ps: Sequence[str]) -> int:
        keys = {matcher(p) for p in ps}
        return sum(1 for g in gold if matcher(g) in keys)

    m5 = matched(preds[:5])
    mm = matched(preds)
    p5, r5 = m5 / 5, m5 / len(gold)
    pm = mm / len(preds) if preds else 0.0
    rm = mm / len(gold)
    return DocScore(_f1(p5, r5), _f1(pm, rm), p5, r5, pm, rm, m5, mm, len(preds), len(gold))


@dataclass(frozen=True)
class SplitReport:
    f1_at_5: float | None
    f1_at_m: float | None
    p_at_5: float | None
    r_at_5: float | None
    p_at_m: float | None
    r_at_m: float | None
    scored: int
    skipped: int


@dataclass(frozen=True)
class MetricsReport:
    present: SplitReport
    absent: SplitReport

    def to_json(self) -> dict:
        return {"present": asdict(self.present), "absent": asdict(self.absent)}


def _mean(xs: list[float]) -> float:
    total = 0.0
    for x in xs:
        total += x
    return total / len(xs)


def split_report(scores: Sequence[DocScore | None]) -> SplitReport:
    """Unweighted mean over scored documents; ``None`` entries count as skipped."""
    kept = [s for s in scores if s is not None]
    skipped = len(scores) - len(kept)
    if not kept:
        return SplitReport(None, None, None, None, None, None, 0, skipped)
    return SplitReport(
        _mean([s.f1_at_5 for s in kept]),
        _mean([s.f1_at_m for s in kept]),
        _mean([s.p_at_5 for s in kept]),
        _mean([s.r_at_5 for s in kept]),
        _mean([s.p_at_m for s in kept]),
        _mean([s.r_at_m for s in kept]),
        len(kept),
        skipped,
    )


def macro_report(
    docs: Iterable[tuple[Sequence[str], Sequence[str], Sequence[str]]], matcher: Matcher = exact
) -> MetricsReport:
    """Score (preds, gold, source_tokens) triples on the present and absent splits independently."""
    per: dict[str, list[DocScore | None]] = {s: [] for s in SPLITS}
    for preds, gold, source in docs:
        pp, pa = split_present_absent(preds, source)
        gp, ga = split_present_absent(gold, source)
        for name, p, g in (("present", pp, gp), ("absent", pa, ga)):
            per[name].append(score_document(p, g, matcher) if g else None)
    return MetricsReport(split_report(per["present"]), split_report(per["absent"]))


# -- B-I-O extraction -----------------------------------------------------
def bio_spans(tags: Sequence[int | str]) -> list[tuple[int, int]]:
    """Maximal B I* runs as [start, end); a stray I opens a new phrase."""
    spans = []
    start = None
    for i, t in enumerate(tags):
        t = TAG_NAMES.index(t) if isinstance(t, str) else int(t)
        if t == TAG_B or (t == TAG_I and start is None):
            if start is not None:
                spans.append((start, i))
            start = i
        elif t == TAG_O and start is not None:
            spans.append((start, i))
            start = None
    if start is not None:
        spans.append((start, len(tags)))
    return spans


def bio_phrase_f1(
    pred_tags: Sequence[Sequence[int | str]], gold_tags: Sequence[Sequence[int | str]]
) -> tuple[float, float, float]:
    """Micro-averaged exact-span precision, recall and F1 over documents."""
    if len(pred_tags) != len(gold_tags):
        raise ValueError(f"{len(pred_tags)} predicted documents vs {len(gold_tags)} gold")
    tp = n_pred = n_gold = 0
    for i, (p, g) in enumerate(zip(pred_tags, gold_tags)):
        if len(p) != len(g):
            raise ValueError(f"document {i}: {len(p)} predicted tags vs {len(g)} gold")
        ps, gs = set(bio_spans(p)), set(bio_spans(g))
        tp += len(ps & gs)
        n_pred += len(ps)
        n_gold += len(gs)
    prec = tp / n_pred if n_pred else 0.0
    rec = tp / n_gold if n_gold else 0.0
    return prec, rec, _f1(prec, rec)


# -- files ----------------------------------------------------------------
def load_predictions(path: str | Path) -> dict[str, list[str]]:
    """Predictions JSONL ``{"id", "keyphrases"}``; phrases normalized and deduplicated."""
    out: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                doc_id, phrases = rec["id"], rec["keyphrases"]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ValueError(f"{path}:{n}: bad prediction record ({e})") from None
            if not isinstance(phrases, list):
                raise ValueError(f"{path}:{n}: keyphrases must be a list")
            seen: list[str] = []
            for p in phrases:
                p = normalize(str(p))
                if p and p not in seen:
                    seen.append(p)
            out[str(doc_id)] = seen
    return out


def format_table(report: MetricsReport) -> str:
    """Fixed-width text table of a report."""

    def cell(x: float | None) -> str:
        return f"{'-':>8}" if x is None else f"{x:8.4f}"

    lines = [f"{'split':<8}{'F1@5':>8}{'F1@M':>8}{'P@5':>8}{'R@5':>8}{'P@M':>8}{'R@M':>8}{'scored':>8}{'skipped':>8}"]
    for name in SPLITS:
        r: SplitReport = getattr(report, name)
        lines.append(
            f"{name:<8}{cell(r.f1_at_5)}{cell(r.f1_at_m)}{cell(r.p_at_5)}{cell(r.r_at_5)}"
            f"{cell(r.p_at_m)}{cell(r.r_at_m)}{r.scored:>8}{r.skipped:>8}"
        )
    return "\n".join(lines)
