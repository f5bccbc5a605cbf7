"""Adam with linear warmup/decay and the per-objective training loop."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .corpus import AlignedDocument, KeyphraseUniverse
from .model import (
    COMPONENTS,
    KBI_WEIGHTS,
    KBIR_WEIGHTS,
    MLM_WEIGHTS,
    LossWeights,
    Model,
    crf_log_likelihood,
    kbir_parts,
    loss_seq2seq,
    save_checkpoint,
)
from .perturb import (
    KeyBartExample,
    PerturbationConfig,
    build_catseq,
    map_ordered,
    perturb_kbir,
    perturb_keybart_pair,
)
from .rng import generator, splitmix64
from .tokenizer import Vocabulary, encode_tokens

log = logging.getLogger(__name__)

OBJECTIVES = ("mlm", "kbi", "kbir", "keybart", "keybart-doc", "finetune-ke", "finetune-kg")
ENCODER_OBJECTIVES = ("mlm", "kbi", "kbir", "finetune-ke")
SEQ2SEQ_OBJECTIVES = ("keybart", "keybart-doc", "finetune-kg")

_DEFAULT_WEIGHTS = {"mlm": MLM_WEIGHTS, "kbi": KBI_WEIGHTS, "kbir": KBIR_WEIGHTS}
# learning rates and batch sizes for the two keyphrase fine-tuning tasks
_FINETUNE_DEFAULTS = {"finetune-ke": (5e-5, 4), "finetune-kg": (5e-5, 32)}


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "kbir"
    learning_rate: float = 1e-5
    batch_size: int = 8
    total_steps: int = 1000
    warmup_steps: int = 20
    weights: LossWeights = KBIR_WEIGHTS
    seed: int = 0
    accumulation: int = 1
    checkpoint_every: int = 0
    perturbation: PerturbationConfig = field(default_factory=PerturbationConfig)

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.batch_size < 1 or self.accumulation < 1:
            raise ValueError("batch_size and accumulation must be >= 1")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("warmup_steps must lie in [0, total_steps]")

    @classmethod
    def for_objective(cls, objective: str, **overrides) -> "TrainConfig":
        base: dict = {"objective": objective, "perturbation": PerturbationConfig.for_objective(objective)}
        if objective in _DEFAULT_WEIGHTS:
            base["weights"] = _DEFAULT_WEIGHTS[objective]
        if objective in _FINETUNE_DEFAULTS:
            base["learning_rate"], base["batch_size"] = _FINETUNE_DEFAULTS[objective]
        seed = overrides.get("seed")
        if seed is not None and "perturbation" not in overrides:
            base["perturbation"] = replace(base["perturbation"], seed=seed)
        base.update(overrides)
        return cls(**base)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear ramp to the peak over the warmup, then linear decay to 0 at ``total_steps``."""
    lr, w, n = cfg.learning_rate, cfg.warmup_steps, cfg.total_steps
    if w and step <= w:
        return lr * step / w
    if n == w:
        return lr
    return lr * max(0.0, (n - step) / (n - w))


class Adam:
    """Bias-corrected Adam; a step with any non-finite gradient is rejected."""

    def __init__(self, params: Sequence[T.Parameter], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}
        self.t = 0
        self.faults = 0

    def step(self, lr: float) -> bool:
        grads = {p.name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for p in self.params}
        if not all(np.isfinite(g).all() for g in grads.values()):
            self.faults += 1
            return False
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p in self.params:
            g = grads[p.name]
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True


def adam_step(params: Sequence[T.Parameter], state: Adam, lr: float) -> bool:
    """One update from the gradients currently stored on ``params``."""
    if [p.name for p in params] != [p.name for p in state.params]:
        raise ValueError("optimizer state does not match the parameters")
    return state.step(lr)


def bio_tags(doc: AlignedDocument) -> list[int]:
    tags = [2] * len(doc.tokens)
    for s in doc.present_spans:
        tags[s.start] = 0
        for i in range(s.start + 1, s.end):
            tags[i] = 1
    return tags


def presabs_target(doc: AlignedDocument, vocab: Vocabulary) -> list[int]:
    present = [doc.tokens[s.start : s.end] for s in doc.present_spans]
    absent = [encode_tokens(p.split(" "), vocab) for p in doc.absent_keyphrases]
    return build_catseq(present + absent, "presabs", [True] * len(present) + [False] * len(absent))


@dataclass
class TrainResult:
    model: Model
    trace: list[dict]
    faults: int = 0


class ExampleFactory:
    """Per-objective example construction for one (document, epoch)."""

    def __init__(self, cfg: TrainConfig, universe: KeyphraseUniverse | None, vocab: Vocabulary | None, max_len: int):
        self.cfg = cfg
        self.universe = universe
        self.vocab = vocab
        self.pcfg = replace(cfg.perturbation, max_seq_len=min(cfg.perturbation.max_seq_len, max_len))
        if cfg.objective == "finetune-kg" and vocab is None:
            raise TrainingError("finetune-kg needs the vocabulary to encode absent keyphrases")

    def __call__(self, item: tuple[AlignedDocument, int]):
        doc, epoch = item
        obj = self.cfg.objective
        n = self.pcfg.max_seq_len
        if obj in ("mlm", "kbi", "kbir"):
            return perturb_kbir(doc, self.pcfg, self.universe, epoch=epoch)
        if obj == "keybart":
            return perturb_keybart_pair(doc, self.pcfg, self.universe, "keyphrases", epoch)
        if obj == "keybart-doc":
            return perturb_keybart_pair(doc, self.pcfg, self.universe, "document", epoch)
        if obj == "finetune-ke":
            return list(doc.tokens[:n]), bio_tags(doc)[:n]
        target = presabs_target(doc, self.vocab)
        if len(target) > n:
            target = target[: n - 1] + target[-1:]
        return KeyBartExample(list(doc.tokens[:n]), target)


def batch_schedule(n_docs: int, cfg: TrainConfig) -> Iterable[list[tuple[int, int]]]:
    """(document index, epoch) pairs for each step; each epoch is a fresh seeded shuffle."""
    per_step = cfg.batch_size * cfg.accumulation
    epoch, order, pos = 0, None, n_docs
    for _ in range(cfg.total_steps):
        batch = []
        while len(batch) < per_step:
            if pos >= n_docs:
                order = generator(splitmix64(cfg.seed ^ splitmix64(epoch + 1))).permutation(n_docs)
                epoch += 1
                pos = 0
            batch.append((int(order[pos]), epoch - 1))
            pos += 1
        yield batch


def batch_loss(model: Model, cfg: TrainConfig, examples: list) -> tuple[T.Tensor, dict[str, float]]:
    """Total loss for a batch and the per-component values logged in the trace."""
    obj = cfg.objective
    logged = dict.fromkeys(COMPONENTS, 0.0)
    if obj in ("mlm", "kbi", "kbir"):
        sums: dict[str, T.Tensor] = {}
        counts = dict.fromkeys(COMPONENTS, 0)
        for ex in examples:
            parts = kbir_parts(model, ex, cfg.weights)
            has = {"mlm": bool(ex.mlm), "infill": bool(ex.infill), "length": bool(ex.infill), "krc": bool(ex.krc)}
            for name, val in parts.items():
                if has[name]:
                    sums[name] = sums[name] + val if name in sums else val
                    counts[name] += 1
        total: T.Tensor | float = 0.0
        for name, coef in zip(COMPONENTS, (cfg.weights.alpha, cfg.weights.gamma, cfg.weights.sigma, cfg.weights.delta)):
            if name in sums:
                comp = sums[name] * (1.0 / counts[name])
                logged[name] = comp.item()
                total = total + coef * comp
            elif coef != 0.0:
                # in the objective but nothing in this batch supervises it
                logged[name] = None
        total = total if isinstance(total, T.Tensor) else T.Tensor(0.0)
    elif obj == "finetune-ke":
        total = sum((crf_log_likelihood(model, model.encode(ids), tags) for ids, tags in examples), T.Tensor(0.0))
        total = total * (1.0 / len(examples))
    else:
        total = sum((loss_seq2seq(model, ex) for ex in examples), T.Tensor(0.0)) * (1.0 / len(examples))
    logged["total"] = total.item()
    return total, logged


def train(
    cfg: TrainConfig,
    docs: Sequence[AlignedDocument],
    model: Model,
    universe: KeyphraseUniverse | None = None,
    vocab: Vocabulary | None = None,
    out_dir: str | Path | None = None,
    threads: int = 1,
    on_step: Callable[[int, dict], None] | None = None,
) -> TrainResult:
    """Run ``cfg.total_steps`` optimizer steps; examples are regenerated every epoch.

    With ``out_dir`` the loss trace goes to ``loss_trace.jsonl`` and the final
    weights to ``checkpoint.kbfg`` (plus ``checkpoint-<step>.kbfg`` every
    ``checkpoint_every`` steps).
    """
    if not docs:
        raise TrainingError("empty corpus")
    want = "seq2seq" if cfg.objective in SEQ2SEQ_OBJECTIVES else "encoder"
    if model.cfg.kind != want:
        raise TrainingError(f"objective {cfg.objective} needs a {want} model, got {model.cfg.kind}")
    factory = ExampleFactory(cfg, universe, vocab, model.cfg.max_seq_len)
    opt = Adam(model.parameters())
    trace: list[dict] = []
    out = Path(out_dir) if out_dir is not None else None
    trace_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        trace_fh = open(out / "loss_trace.jsonl", "w", encoding="utf-8")
    meta = {"objective": cfg.objective, "seed": cfg.seed}
    try:
        for step, batch in enumerate(batch_schedule(len(docs), cfg), start=1):
            examples = list(map_ordered(factory, [(docs[i], e) for i, e in batch], threads))
            model.zero_grad()
            seen: dict[str, list[float]] = {c: [] for c in (*COMPONENTS, "total")}
            absent = set()
            for k in range(cfg.accumulation):
                micro = examples[k * cfg.batch_size : (k + 1) * cfg.batch_size]
                loss, parts = batch_loss(model, cfg, micro)
                if loss.requires_grad:
                    (loss * (1.0 / cfg.accumulation)).backward()
                for name, val in parts.items():
                    if val is None:
                        absent.add(name)
                    else:
                        seen[name].append(val)
            logged = {}
            for name, vals in seen.items():
                # unsupervised micro-batches are left out of the mean; all of them -> null
                logged[name] = sum(vals) / len(vals) if vals else (None if name in absent else 0.0)
            lr = lr_at(step, cfg)
            opt.step(lr)
            rec = {"step": step, "lr": lr, **{c: logged[c] for c in COMPONENTS}, "total": logged["total"]}
            trace.append(rec)
            if trace_fh is not None:
                trace_fh.write(json.dumps(rec) + "\n")
            if on_step is not None:
                on_step(step, rec)
            if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(model, out / f"checkpoint-{step}.kbfg", {**meta, "step": step})
    finally:
        if trace_fh is not None:
            trace_fh.close()
    model.zero_grad()
    if out is not None:
        save_checkpoint(model, out / "checkpoint.kbfg", {**meta, "step": cfg.total_steps})
    if opt.faults:
        log.warning("%d optimizer steps rejected for non-finite gradients", opt.faults)
    return TrainResult(model, trace, opt.faults)
