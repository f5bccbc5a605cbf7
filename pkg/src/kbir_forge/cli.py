"""Command-line entry point: ``kbir-forge <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric fault.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Callable

import yaml

from . import __version__
from .corpus import (
    DEFAULT_UNIVERSE_CAP,
    CorpusError,
    KeyphraseUniverse,
    align_keyphrases,
    build_universe,
    load_corpus,
)
from .evaluation import bio_phrase_f1, format_table, load_predictions, macro_report
from .model import CheckpointError, LossWeights, Model, ModelConfig, decode_catseq, load_checkpoint, tag_document
from .perturb import PerturbationConfig, map_ordered, perturb_kbir, perturb_keybart_pair, perturb_stats, thread_count
from .tensor import NumericFault
from .tokenizer import Vocabulary, build_vocab, normalize, tokenize
from .train import ENCODER_OBJECTIVES, OBJECTIVES, TrainConfig, TrainingError, bio_tags, train
from .verify import FULL_TOLERANCE, check_objective

log = logging.getLogger("kbir_forge")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
PRETRAIN_OBJECTIVES = ("mlm", "kbi", "kbir", "keybart", "keybart-doc")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# -- shared loading -------------------------------------------------------
def _need(args, *names: str) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError(f"{args.command} needs {', '.join(missing)}")


def _docs(args):
    errors: list[CorpusError] = []
    docs = list(load_corpus(args.corpus, lenient=args.lenient, errors=errors))
    for e in errors:
        log.warning("skipped %s", e)
    return docs


def _vocab(args) -> Vocabulary:
    return Vocabulary.load(args.vocab)


def _aligned(args, vocab: Vocabulary):
    return [align_keyphrases(d, vocab) for d in _docs(args)]


def _universe(args, vocab: Vocabulary) -> KeyphraseUniverse | None:
    if args.universe is None:
        return None
    return KeyphraseUniverse.load(args.universe, vocab, args.cap)


def _write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise UsageError(f"config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError(f"config {path}: top level must be a mapping")
    allowed = {"train", "model", "perturbation", "weights"}
    unknown = set(raw) - allowed
    if unknown:
        raise UsageError(f"config {path}: unknown sections {sorted(unknown)}")
    return raw


def _section(cls, values: dict, name: str) -> dict:
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise UsageError(f"config section {name!r}: unknown keys {sorted(unknown)}")
    return dict(values)


# -- subcommands ----------------------------------------------------------
def cmd_ingest(args) -> str:
    _need(args, "corpus")
    errors: list[CorpusError] = []
    docs = list(load_corpus(args.corpus, lenient=True, errors=errors))
    report = {
        "documents": len(docs),
        "malformed": len(errors),
        "errors": [{"line": e.line_no, "message": e.message} for e in errors],
        "keyphrases": sum(len(d.keyphrases) for d in docs),
    }
    if args.out:
        _write_json(args.out, report)
    if errors and not args.lenient:
        for e in errors:
            print(str(e), file=sys.stderr)
        raise DataError(f"{len(errors)} malformed lines in {args.corpus}")
    return f"{len(docs)} documents, {len(errors)} malformed lines"


def cmd_build_vocab(args) -> str:
    _need(args, "corpus", "out")
    texts = []
    for d in _docs(args):
        texts.append(d.text)
        texts.extend(d.keyphrases)
    vocab = build_vocab(texts, min_freq=args.min_freq, max_size=args.max_size)
    vocab.save(args.out)
    return f"vocabulary of {vocab.size} tokens -> {args.out}"


def cmd_build_universe(args) -> str:
    _need(args, "corpus", "vocab", "out")
    vocab = _vocab(args)
    uni = build_universe(_aligned(args, vocab), vocab, cap=args.cap, seed=args.seed)
    uni.save(args.out)
    return f"{len(uni.phrases)} keyphrases -> {args.out}"


def _perturbation(args, conf: dict) -> PerturbationConfig:
    objective = args.objective or conf.get("train", {}).get("objective", "kbir")
    over = _section(PerturbationConfig, conf.get("perturbation", {}), "perturbation")
    over["seed"] = args.seed
    return PerturbationConfig.for_objective(objective, **over)


def cmd_perturb(args) -> str:
    _need(args, "corpus", "vocab", "out")
    conf = _load_config(args.config)
    objective = args.objective or "kbir"
    if objective not in PRETRAIN_OBJECTIVES:
        raise UsageError(f"perturb supports {', '.join(PRETRAIN_OBJECTIVES)}")
    vocab = _vocab(args)
    docs = _aligned(args, vocab)
    universe = _universe(args, vocab)
    pcfg = _perturbation(args, conf)
    if pcfg.p_kp_replace > 0 and universe is None:
        raise UsageError(f"objective {objective} replaces keyphrases and needs --universe")
    epoch = args.epoch

    def one(doc):
        if objective.startswith("keybart"):
            mode = "document" if objective == "keybart-doc" else "keyphrases"
            ex = perturb_keybart_pair(doc, pcfg, universe, mode, epoch)
        else:
            ex = perturb_kbir(doc, pcfg, universe, epoch=epoch)
        return json.dumps({"id": doc.id, **ex.to_json()}, separators=(",", ":"))

    n = 0
    with open(args.out, "w", encoding="utf-8") as fh:
        for line in map_ordered(one, docs, thread_count(args.threads)):
            fh.write(line + "\n")
            n += 1
    return f"{n} perturbed examples -> {args.out}"


def cmd_stats(args) -> str:
    _need(args, "corpus", "vocab")
    conf = _load_config(args.config)
    vocab = _vocab(args)
    docs = _aligned(args, vocab)
    universe = _universe(args, vocab)
    pcfg = _perturbation(args, conf)
    stats = perturb_stats(docs, pcfg, universe, epoch=args.epoch)
    stats["dropped_keyphrases"] = sum(d.dropped_keyphrases for d in docs)
    stats["absent_keyphrases"] = sum(len(d.absent_keyphrases) for d in docs)
    stats["present_spans"] = sum(len(d.present_spans) for d in docs)
    if args.out:
        _write_json(args.out, stats)
    return json.dumps(stats, indent=2, sort_keys=True)


def _train_config(args, objective: str, conf: dict) -> TrainConfig:
    over = _section(TrainConfig, conf.get("train", {}), "train")
    over.pop("objective", None)
    if "weights" in conf:
        over["weights"] = LossWeights(**_section(LossWeights, conf["weights"], "weights"))
    flags = {"total_steps": args.steps, "batch_size": args.batch, "learning_rate": args.lr}
    over.update({k: v for k, v in flags.items() if v is not None})
    over["seed"] = args.seed
    if args.warmup is not None:
        over["warmup_steps"] = args.warmup
    if "warmup_steps" not in over and "total_steps" in over:
        over["warmup_steps"] = min(TrainConfig.warmup_steps, over["total_steps"])
    pover = _section(PerturbationConfig, conf.get("perturbation", {}), "perturbation")
    over["perturbation"] = PerturbationConfig.for_objective(objective, **{**pover, "seed": args.seed})
    try:
        return TrainConfig.for_objective(objective, **over)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _model(args, objective: str, vocab: Vocabulary, conf: dict) -> Model:
    kind = "encoder" if objective in ENCODER_OBJECTIVES else "seq2seq"
    if args.init is not None:
        model, _ = load_checkpoint(args.init)
        if model.cfg.kind != kind:
            raise UsageError(f"--init checkpoint is a {model.cfg.kind} model; {objective} needs {kind}")
        return model
    mc = _section(ModelConfig, conf.get("model", {}), "model")
    flags = {"d_model": args.d_model, "n_layers": args.layers, "n_heads": args.heads}
    mc.update({k: v for k, v in flags.items() if v is not None})
    mc.update(vocab_size=vocab.size, kind=kind)
    mc.setdefault("init_seed", args.seed)
    try:
        return Model(ModelConfig(**mc))
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _run_training(args, objective: str) -> str:
    _need(args, "corpus", "vocab", "out")
    conf = _load_config(args.config)
    cfg = _train_config(args, objective, conf)
    vocab = _vocab(args)
    docs = _aligned(args, vocab)
    universe = _universe(args, vocab)
    if objective in ("kbir", "keybart", "keybart-doc") and universe is None and cfg.perturbation.p_kp_replace > 0:
        raise UsageError(f"objective {objective} needs --universe")
    model = _model(args, objective, vocab, conf)
    out = Path(args.out)
    res = train(cfg, docs, model, universe=universe, vocab=vocab, out_dir=out, threads=thread_count(args.threads))
    last = res.trace[-1]
    _write_json(
        out / "train_report.json",
        {"objective": objective, "steps": cfg.total_steps, "rejected_steps": res.faults, "final": last,
         "config": asdict(cfg), "model": asdict(model.cfg)},
    )
    return f"{objective}: {cfg.total_steps} steps, final total loss {last['total']:.6f} -> {out}"


def cmd_pretrain(args) -> str:
    objective = args.objective or "kbir"
    if objective not in PRETRAIN_OBJECTIVES:
        raise UsageError(f"pretrain objectives: {', '.join(PRETRAIN_OBJECTIVES)}")
    return _run_training(args, objective)


def cmd_finetune_ke(args) -> str:
    return _run_training(args, "finetune-ke")


def cmd_finetune_kg(args) -> str:
    return _run_training(args, "finetune-kg")


def cmd_eval_ke(args) -> str:
    _need(args, "checkpoint", "corpus", "vocab")
    model, _ = load_checkpoint(args.checkpoint)
    if model.cfg.kind != "encoder":
        raise UsageError("eval-ke needs an encoder checkpoint")
    vocab = _vocab(args)
    docs = _aligned(args, vocab)
    n = model.cfg.max_seq_len
    pred = list(map_ordered(lambda d: tag_document(model, list(d.tokens[:n])), docs, thread_count(args.threads)))
    gold = [bio_tags(d)[:n] for d in docs]
    p, r, f1 = bio_phrase_f1(pred, gold)
    report = {"documents": len(docs), "precision": p, "recall": r, "f1": f1}
    if args.out:
        _write_json(args.out, report)
    return f"phrase P {p:.4f}  R {r:.4f}  F1 {f1:.4f}  ({len(docs)} documents)"


def cmd_eval_kg(args) -> str:
    _need(args, "gold")
    gold = list(load_corpus(args.gold, lenient=args.lenient))
    if args.preds is not None:
        preds = load_predictions(args.preds)
    else:
        _need(args, "checkpoint", "vocab")
        preds = _generate(args, gold)
    triples = []
    missing = 0
    for d in gold:
        if d.id not in preds:
            missing += 1
        dedup: list[str] = []
        for k in d.keyphrases:
            k = normalize(k)
            if k and k not in dedup:
                dedup.append(k)
        triples.append((preds.get(d.id, []), dedup, tokenize(d.text)))
    if missing:
        log.warning("%d gold documents have no prediction; scored as empty", missing)
    report = macro_report(triples)
    if args.out:
        _write_json(args.out, report.to_json())
    return format_table(report)


def _generate(args, gold) -> dict[str, list[str]]:
    model, _ = load_checkpoint(args.checkpoint)
    if model.cfg.kind != "seq2seq":
        raise UsageError("generation needs a seq2seq checkpoint")
    vocab = _vocab(args)
    n = model.cfg.max_seq_len
    beam = args.beam
    if beam < 1 or args.max_gen_len < 1:
        raise UsageError("--beam and --max-gen-len must be >= 1")

    def one(d):
        ids = align_keyphrases(d, vocab).tokens[:n]
        return d.id, decode_catseq(model, list(ids), vocab, beam=beam, max_len=args.max_gen_len)

    out = dict(map_ordered(one, gold, thread_count(args.threads)))
    if args.write_preds:
        with open(args.write_preds, "w", encoding="utf-8") as fh:
            for d in gold:
                fh.write(json.dumps({"id": d.id, "keyphrases": out[d.id]}) + "\n")
    return out


def cmd_gradcheck(args) -> str:
    objective = args.objective or "kbir"
    if objective not in (*OBJECTIVES, "crf"):
        raise UsageError(f"unknown objective {objective!r}")
    res = check_objective(
        objective, d_model=args.d_model or 16, layers=args.layers or 2, heads=args.heads or 2, seed=args.seed
    )
    line = f"{objective}: max relative error {res.max_rel_error:.3e} (tolerance {FULL_TOLERANCE:g})"
    if args.out:
        _write_json(args.out, {**asdict(res), "ok": res.ok})
    if not res.ok:
        raise NumericFault(line)
    return line


HELP = {
    "ingest": "validate a JSONL corpus",
    "build-vocab": "build the token vocabulary",
    "build-universe": "build the replacement keyphrase universe",
    "perturb": "write perturbed training examples",
    "pretrain": "pre-train with mlm, kbi, kbir, keybart or keybart-doc",
    "finetune-ke": "fine-tune a B-I-O keyphrase tagger",
    "finetune-kg": "fine-tune a keyphrase generator",
    "eval-ke": "score a tagger by phrase-level F1",
    "eval-kg": "score generated keyphrases by F1@5 and F1@M",
    "gradcheck": "finite-difference check of a full loss",
    "stats": "report empirical perturbation rates",
}

COMMANDS: dict[str, Callable] = {
    "ingest": cmd_ingest,
    "build-vocab": cmd_build_vocab,
    "build-universe": cmd_build_universe,
    "perturb": cmd_perturb,
    "pretrain": cmd_pretrain,
    "finetune-ke": cmd_finetune_ke,
    "finetune-kg": cmd_finetune_kg,
    "eval-ke": cmd_eval_ke,
    "eval-kg": cmd_eval_kg,
    "gradcheck": cmd_gradcheck,
    "stats": cmd_stats,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--corpus")
    common.add_argument("--vocab")
    common.add_argument("--universe")
    common.add_argument("--config")
    common.add_argument("--objective")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out")
    common.add_argument("--steps", type=int)
    common.add_argument("--batch", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--warmup", type=int)
    common.add_argument("--beam", type=int, default=50)
    common.add_argument("--max-gen-len", type=int, default=40)
    common.add_argument("--threads", type=int)
    common.add_argument("--preds")
    common.add_argument("--gold")
    common.add_argument("--write-preds")
    common.add_argument("--checkpoint")
    common.add_argument("--init")
    common.add_argument("--d-model", type=int)
    common.add_argument("--layers", type=int)
    common.add_argument("--heads", type=int)
    common.add_argument("--epoch", type=int, default=0)
    common.add_argument("--cap", type=int, default=DEFAULT_UNIVERSE_CAP)
    common.add_argument("--min-freq", type=int, default=1)
    common.add_argument("--max-size", type=int)
    common.add_argument("--lenient", action="store_true")
    common.add_argument("--verbose", action="store_true")

    parser = _Parser(prog="kbir-forge", description="Keyphrase-aware pre-training pipeline.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}", parser_class=_Parser)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name])
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print(f"kbir-forge: error: a subcommand is required: {', '.join(COMMANDS)}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        print(COMMANDS[args.command](args))
        return EXIT_OK
    except UsageError as exc:
        print(f"kbir-forge {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFault as exc:
        print(f"kbir-forge {args.command}: numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CorpusError, CheckpointError, TrainingError, OSError, ValueError, LookupError) as exc:
        print(f"kbir-forge {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
