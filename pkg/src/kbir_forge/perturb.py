"""Corruption of aligned documents into supervised examples for each objective."""

from __future__ import annotations

import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Iterator, Sequence, TypeVar

import numpy as np

from .corpus import AlignedDocument, KeyphraseUniverse, ReplacementUnavailable, sample_replacement_index
from .rng import document_rng
from .tokenizer import BOS, EOS, KP_SEP, MASK

T = TypeVar("T")
R = TypeVar("R")

KEEP, MASK_SPAN, REPLACE = 0, 1, 2


@dataclass(frozen=True)
class PerturbationConfig:
    """Corruption rates.

    ``p_kp_replace`` is the replacement probability among keyphrase spans that
    were not masked.
    """

    p_mlm: float = 0.05
    p_kp_mask: float = 0.20
    p_kp_replace: float = 0.40
    max_infill_span: int = 10
    max_replacements: int = 20
    max_seq_len: int = 512
    seed: int = 0

    def __post_init__(self):
        for name in ("p_mlm", "p_kp_mask", "p_kp_replace"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.max_infill_span < 1:
            raise ValueError("max_infill_span must be >= 1")
        if self.max_replacements < 0 or self.max_seq_len < 1:
            raise ValueError("max_replacements must be >= 0 and max_seq_len >= 1")

    @classmethod
    def for_objective(cls, objective: str, **overrides) -> "PerturbationConfig":
        base = OBJECTIVE_PERTURBATION[objective]
        return replace(base, **overrides)


# per-objective corruption rows; a replacement rate of 0 disables replacement
MLM_ROW = PerturbationConfig(p_mlm=0.15, p_kp_mask=0.0, p_kp_replace=0.0, max_replacements=0)
KBI_ROW = PerturbationConfig(p_mlm=0.15, p_kp_mask=0.20, p_kp_replace=0.0, max_replacements=0)
KBIR_ROW = PerturbationConfig(p_mlm=0.05, p_kp_mask=0.20, p_kp_replace=0.40, max_infill_span=10, max_replacements=20)

OBJECTIVE_PERTURBATION = {
    "mlm": MLM_ROW,
    "kbi": KBI_ROW,
    "kbir": KBIR_ROW,
    "keybart": KBIR_ROW,
    "keybart-doc": KBIR_ROW,
    # fine-tuning sees clean text
    "finetune-ke": PerturbationConfig(p_mlm=0.0, p_kp_mask=0.0, p_kp_replace=0.0, max_replacements=0),
    "finetune-kg": PerturbationConfig(p_mlm=0.0, p_kp_mask=0.0, p_kp_replace=0.0, max_replacements=0),
}


@dataclass(frozen=True)
class MlmRecord:
    position: int
    original_id: int

    def to_json(self) -> dict:
        return {"position": self.position, "original_id": self.original_id}


@dataclass(frozen=True)
class InfillRecord:
    mask_position: int
    original_tokens: tuple[int, ...]
    original_start: int
    original_end: int

    @property
    def left_boundary(self) -> int:
        return self.mask_position - 1

    @property
    def right_boundary(self) -> int:
        return self.mask_position + 1

    @property
    def true_length(self) -> int:
        return len(self.original_tokens)

    def to_json(self) -> dict:
        return {
            "mask_position": self.mask_position,
            "original_tokens": list(self.original_tokens),
            "original_start": self.original_start,
            "original_end": self.original_end,
        }


@dataclass(frozen=True)
class KrcRecord:
    span_start: int
    span_end: int
    label: int
    original_surface: str
    replacement_surface: str | None = None
    original_tokens: tuple[int, ...] = ()

    def __post_init__(self):
        replaced = self.replacement_surface is not None and self.replacement_surface != self.original_surface
        if (self.label == 1) != replaced:
            raise ValueError("label 1 iff a distinct replacement surface is present")

    def to_json(self) -> dict:
        out = {
            "span_start": self.span_start,
            "span_end": self.span_end,
            "label": self.label,
            "original_surface": self.original_surface,
        }
        if self.label:
            out["replacement_surface"] = self.replacement_surface
            out["original_tokens"] = list(self.original_tokens)
        return out


@dataclass
class KbirExample:
    perturbed: list[int]
    mlm: list[MlmRecord] = field(default_factory=list)
    infill: list[InfillRecord] = field(default_factory=list)
    krc: list[KrcRecord] = field(default_factory=list)
    truncated: bool = False
    counts: Counter = field(default_factory=Counter, repr=False, compare=False)

    def to_json(self) -> dict:
        return {
            "perturbed": self.perturbed,
            "mlm": [r.to_json() for r in self.mlm],
            "infill": [r.to_json() for r in self.infill],
            "krc": [r.to_json() for r in self.krc],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "KbirExample":
        return cls(
            list(obj["perturbed"]),
            [MlmRecord(r["position"], r["original_id"]) for r in obj["mlm"]],
            [
                InfillRecord(r["mask_position"], tuple(r["original_tokens"]), r["original_start"], r["original_end"])
                for r in obj["infill"]
            ],
            [
                KrcRecord(
                    r["span_start"],
                    r["span_end"],
                    r["label"],
                    r["original_surface"],
                    r.get("replacement_surface"),
                    tuple(r.get("original_tokens", ())),
                )
                for r in obj["krc"]
            ],
        )


@dataclass
class KeyBartExample:
    input: list[int]
    target: list[int]

    def to_json(self) -> dict:
        return {"input": self.input, "target": self.target}

    @classmethod
    def from_json(cls, obj: dict) -> "KeyBartExample":
        return cls(list(obj["input"]), list(obj["target"]))


class ReconstructionMismatch(ValueError):
    pass


def _span_actions(doc: AlignedDocument, cfg: PerturbationConfig, rng, counts: Counter) -> list[int]:
    n = len(doc.tokens)
    spans = doc.present_spans
    actions = [KEEP] * len(spans)
    interior = [i for i, s in enumerate(spans) if s.start > 0 and s.end < n]
    counts["edge_spans"] += len(spans) - len(interior)
    if not interior:
        return actions
    draws = rng.random(len(interior))
    p_mask = cfg.p_kp_mask
    # replacement band sized so that p_kp_replace is the rate among non-masked spans
    p_rep_short = p_mask + (1.0 - p_mask) * cfg.p_kp_replace
    replaced = 0
    for i, u in zip(interior, draws):
        span = spans[i]
        if span.length <= cfg.max_infill_span:
            counts["mask_eligible"] += 1
            if u < p_mask:
                actions[i] = MASK_SPAN
                counts["masked_spans"] += 1
                continue
            hit = u < p_rep_short
        else:
            counts["long_spans"] += 1
            hit = u < cfg.p_kp_replace
        counts["replace_eligible"] += 1
        if hit:
            if replaced < cfg.max_replacements:
                actions[i] = REPLACE
                replaced += 1
            else:
                counts["replace_capped"] += 1
    return actions


def perturb_kbir(
    doc: AlignedDocument,
    cfg: PerturbationConfig,
    universe: KeyphraseUniverse | None,
    epoch: int = 0,
    rng=None,
) -> KbirExample:
    """Apply keyphrase masking, keyphrase replacement and token masking to one document.

    Random draws come from ``rng`` or, by default, from the stream derived
    from ``(cfg.seed, doc.id, epoch)``: first one uniform per interior keyphrase
    span, then one per non-keyphrase token, then the replacement samples in
    document order. Spans touching either end of the sequence have no
    boundary token on one side and are left untouched.
    """
    if rng is None:
        rng = document_rng(cfg.seed, doc.id, epoch)
    counts: Counter = Counter()
    tokens = doc.tokens
    n = len(tokens)
    spans = doc.present_spans
    actions = _span_actions(doc, cfg, rng, counts)

    in_kp = np.zeros(n, dtype=bool)
    for s in spans:
        in_kp[s.start : s.end] = True
    candidates = np.flatnonzero(~in_kp)
    counts["mlm_eligible"] += len(candidates)
    mlm_mark = np.zeros(n, dtype=bool)
    if len(candidates) and cfg.p_mlm > 0:
        mlm_mark[candidates[rng.random(len(candidates)) < cfg.p_mlm]] = True

    replacement: dict[int, int] = {}
    for i, act in enumerate(actions):
        if act != REPLACE:
            continue
        try:
            if universe is None:
                raise ReplacementUnavailable(spans[i].surface)
            replacement[i] = sample_replacement_index(universe, spans[i].surface, rng, cfg.max_infill_span)
        except ReplacementUnavailable:
            actions[i] = KEEP
            counts["replace_unavailable"] += 1

    out: list[int] = []
    mlm: list[MlmRecord] = []
    infill: list[InfillRecord] = []
    krc: list[KrcRecord] = []
    span_at = {s.start: i for i, s in enumerate(spans)}
    pos = 0
    while pos < n:
        si = span_at.get(pos)
        if si is None:
            if mlm_mark[pos]:
                mlm.append(MlmRecord(len(out), tokens[pos]))
                out.append(MASK)
            else:
                out.append(tokens[pos])
            pos += 1
            continue
        span = spans[si]
        original = tuple(tokens[span.start : span.end])
        act = actions[si]
        interior = span.start > 0 and span.end < n
        if act == MASK_SPAN:
            infill.append(InfillRecord(len(out), original, span.start, span.end))
            out.append(MASK)
            counts["max_masked_len"] = max(counts["max_masked_len"], span.length)
        elif act == REPLACE:
            j = replacement[si]
            start = len(out)
            out.extend(universe.token_ids[j])
            krc.append(KrcRecord(start, len(out), 1, span.surface, universe.phrases[j], original))
            counts["replaced_spans"] += 1
        else:
            start = len(out)
            out.extend(original)
            if interior:
                krc.append(KrcRecord(start, len(out), 0, span.surface))
        pos = span.end
    counts["mlm_masked"] += len(mlm)

    ex = KbirExample(out, mlm, infill, krc, counts=counts)
    if len(out) > cfg.max_seq_len:
        ex = truncate_example(ex, cfg.max_seq_len)
    return ex


def truncate_example(ex: KbirExample, max_len: int) -> KbirExample:
    """Cut to ``max_len`` tokens, dropping records whose position or boundaries fall outside."""
    if len(ex.perturbed) <= max_len:
        return ex
    last = max_len - 1
    kept = KbirExample(
        ex.perturbed[:max_len],
        [r for r in ex.mlm if r.position <= last],
        [r for r in ex.infill if r.right_boundary <= last],
        [r for r in ex.krc if r.span_end <= last],
        truncated=True,
        counts=ex.counts,
    )
    kept.counts["truncated_records"] += (
        len(ex.mlm) + len(ex.infill) + len(ex.krc) - len(kept.mlm) - len(kept.infill) - len(kept.krc)
    )
    return kept


def build_catseq(
    phrases: Sequence[Sequence[int]],
    ordering: str = "occurrence",
    present_flags: Sequence[bool] | None = None,
) -> list[int]:
    """Join keyphrase token sequences with KP_SEP between BOS and EOS.

    Duplicates keep their first occurrence. ``presabs`` ordering moves every
    present phrase ahead of the absent ones, preserving order within each group.
    """
    if ordering not in ("occurrence", "presabs"):
        raise ValueError(f"unknown ordering {ordering!r}")
    flags = list(present_flags) if present_flags is not None else [True] * len(phrases)
    if len(flags) != len(phrases):
        raise ValueError("present_flags must match phrases")
    seen: set[tuple[int, ...]] = set()
    unique: list[tuple[tuple[int, ...], bool]] = []
    for p, flag in zip(phrases, flags):
        key = tuple(int(t) for t in p)
        if not key or key in seen:
            continue
        seen.add(key)
        unique.append((key, bool(flag)))
    if ordering == "presabs":
        unique = [u for u in unique if u[1]] + [u for u in unique if not u[1]]
    out = [BOS]
    for k, (p, _) in enumerate(unique):
        if k:
            out.append(KP_SEP)
        out.extend(p)
    out.append(EOS)
    return out


def keyphrase_target(doc: AlignedDocument) -> list[int]:
    return build_catseq([doc.tokens[s.start : s.end] for s in doc.present_spans])


def perturb_keybart_pair(
    doc: AlignedDocument,
    cfg: PerturbationConfig,
    universe: KeyphraseUniverse | None,
    mode: str = "keyphrases",
    epoch: int = 0,
    rng=None,
) -> KeyBartExample:
    """Corrupted input as in :func:`perturb_kbir`; the target is either the
    present keyphrases in CatSeq form or the clean document."""
    ex = perturb_kbir(doc, cfg, universe, epoch=epoch, rng=rng)
    if mode == "keyphrases":
        target = keyphrase_target(doc)
    elif mode == "document":
        target = [BOS, *doc.tokens, EOS]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if len(target) > cfg.max_seq_len:
        target = target[: cfg.max_seq_len - 1] + [EOS]
    return KeyBartExample(list(ex.perturbed), target)


def reconstruct_original(ex: KbirExample) -> list[int]:
    """Undo every recorded edit of an untruncated example."""
    if ex.truncated:
        raise ReconstructionMismatch("cannot reconstruct a truncated example")
    n = len(ex.perturbed)
    single: dict[int, tuple[int, ...]] = {}
    for r in ex.mlm:
        single[r.position] = (r.original_id,)
    for r in ex.infill:
        if r.mask_position in single:
            raise ReconstructionMismatch(f"position {r.mask_position} claimed twice")
        single[r.mask_position] = r.original_tokens
    for pos in single:
        if not 0 <= pos < n or ex.perturbed[pos] != MASK:
            raise ReconstructionMismatch(f"record at {pos} does not point at a mask token")
    spans = {r.span_start: r for r in ex.krc if r.label == 1}
    out: list[int] = []
    pos = 0
    while pos < n:
        if pos in single:
            out.extend(single[pos])
            pos += 1
        elif pos in spans:
            r = spans[pos]
            if not r.original_tokens or not pos < r.span_end <= n:
                raise ReconstructionMismatch(f"invalid replaced span at {pos}")
            if any(p in single for p in range(pos, r.span_end)):
                raise ReconstructionMismatch(f"replaced span at {pos} overlaps a mask record")
            out.extend(r.original_tokens)
            pos = r.span_end
        else:
            out.append(ex.perturbed[pos])
            pos += 1
    return out


def perturb_stats(
    docs: Iterable[AlignedDocument], cfg: PerturbationConfig, universe: KeyphraseUniverse | None, epoch: int = 0
) -> dict:
    """Empirical corruption rates over a document stream."""
    total: Counter = Counter()
    n_docs = 0
    max_repl = 0
    max_span = 0
    for doc in docs:
        ex = perturb_kbir(doc, cfg, universe, epoch=epoch)
        c = ex.counts
        total.update({k: v for k, v in c.items() if k != "max_masked_len"})
        max_span = max(max_span, c["max_masked_len"])
        max_repl = max(max_repl, c["replaced_spans"])
        n_docs += 1
    if n_docs == 0:
        raise ValueError("perturb_stats needs at least one document")

    def rate(num: str, den: int) -> float:
        return total[num] / den if den else 0.0

    return {
        "documents": n_docs,
        "mlm_rate": rate("mlm_masked", total["mlm_eligible"]),
        "kp_mask_rate": rate("masked_spans", total["mask_eligible"]),
        "replace_rate": rate("replaced_spans", total["replace_eligible"]),
        "max_masked_span_len": max_span,
        "max_replacements_per_doc": max_repl,
        "mlm_eligible_tokens": total["mlm_eligible"],
        "mask_eligible_spans": total["mask_eligible"],
        "replace_eligible_spans": total["replace_eligible"],
        "replace_unavailable": total["replace_unavailable"],
        "replace_capped": total["replace_capped"],
        "edge_spans": total["edge_spans"],
    }


def thread_count(explicit: int | None = None) -> int:
    if explicit:
        return max(1, explicit)
    env = os.environ.get("KBIR_FORGE_THREADS")
    return max(1, int(env)) if env else 1


def map_ordered(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> Iterator[R]:
    """``map`` over worker threads; results come back in input order."""
    if threads <= 1:
        yield from map(fn, items)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        yield from pool.map(fn, items)
