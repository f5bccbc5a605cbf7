"""Toy transformer encoder / encoder-decoder with the keyphrase objective heads."""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .perturb import InfillRecord, KbirExample, KeyBartExample, KrcRecord, MlmRecord
from .tensor import Parameter, Tensor
from .tokenizer import BOS, EOS, KP_SEP, N_SPECIAL, Vocabulary, decode, normalize

B_TAG, I_TAG, O_TAG = 0, 1, 2
TAG_NAMES = ("B", "I", "O")
_NEG = -1e9
# small models learn much faster from a wider embedding init than the usual 0.02
EMB_STD = 0.1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    ffn_dim: int = 0  # 0 means 4 * d_model
    max_seq_len: int = 128
    max_infill_span: int = 10
    dropout: float = 0.0
    kind: str = "encoder"  # "encoder" or "seq2seq"
    init_seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.max_infill_span < 1:
            raise ValueError("max_infill_span must be >= 1")
        if self.kind not in ("encoder", "seq2seq"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.dropout != 0.0:
            raise ValueError("only dropout 0 is supported")
        if self.ffn_dim == 0:
            object.__setattr__(self, "ffn_dim", 4 * self.d_model)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # MLM
    gamma: float = 0.33  # infill
    sigma: float = 1.0  # length prediction
    delta: float = 2.0  # replacement classification

    def __post_init__(self):
        w = (self.alpha, self.gamma, self.sigma, self.delta)
        if any(x < 0 for x in w) or not any(x > 0 for x in w):
            raise ValueError("loss weights must be non-negative with at least one positive")

    def as_dict(self) -> dict[str, float]:
        return {"mlm": self.alpha, "infill": self.gamma, "length": self.sigma, "krc": self.delta}


# coefficient rows of the three pre-training objectives
MLM_WEIGHTS = LossWeights(1.0, 0.0, 0.0, 0.0)
KBI_WEIGHTS = LossWeights(1.0, 0.33, 1.0, 0.0)
KBIR_WEIGHTS = LossWeights(1.0, 0.33, 1.0, 2.0)

COMPONENTS = ("mlm", "infill", "length", "krc")


class Model:
    """Named parameters plus the forward computations.

    Parameter layout (``kind == "encoder"`` adds the objective heads,
    ``"seq2seq"`` adds the decoder stack). The vocabulary projection of every
    head is tied to ``tok_emb``.
    """

    def __init__(self, cfg: ModelConfig, params: Mapping[str, np.ndarray] | None = None):
        self.cfg = cfg
        self.params: dict[str, Parameter] = {}
        shapes = self._shapes()
        rng = np.random.default_rng(cfg.init_seed)
        for name, (shape, init) in shapes.items():
            if params is not None:
                data = np.asarray(params[name], dtype=np.float64)
                if data.shape != shape:
                    raise ValueError(f"parameter {name}: shape {data.shape} != {shape}")
            elif init == "zeros":
                data = np.zeros(shape)
            elif init == "ones":
                data = np.ones(shape)
            elif init == "emb":
                data = rng.normal(0.0, EMB_STD, size=shape)
            else:
                data = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
            self.params[name] = Parameter(name, data)
        if params is not None and set(params) != set(shapes):
            raise ValueError("parameter names do not match the configuration")

    # -- layout -----------------------------------------------------------
    def _shapes(self) -> dict[str, tuple[tuple[int, ...], str]]:
        c = self.cfg
        d, f, v = c.d_model, c.ffn_dim, c.vocab_size
        s: dict[str, tuple[tuple[int, ...], str]] = {
            "tok_emb": ((v, d), "emb"),
            "pos_emb": ((c.max_seq_len, d), "emb"),
            "lm_bias": ((v,), "zeros"),
        }

        def ln(prefix):
            s[prefix + ".g"] = ((d,), "ones")
            s[prefix + ".b"] = ((d,), "zeros")

        def attn(prefix):
            # no key bias: softmax is invariant to it, so its gradient is identically zero
            for w in "qkvo":
                s[f"{prefix}.w{w}"] = ((d, d), "lin")
                if w != "k":
                    s[f"{prefix}.b{w}"] = ((d,), "zeros")

        def ffn(prefix):
            s[prefix + ".w1"] = ((d, f), "lin")
            s[prefix + ".b1"] = ((f,), "zeros")
            s[prefix + ".w2"] = ((f, d), "lin")
            s[prefix + ".b2"] = ((d,), "zeros")

        for i in range(c.n_layers):
            ln(f"enc.{i}.ln1")
            attn(f"enc.{i}.attn")
            ln(f"enc.{i}.ln2")
            ffn(f"enc.{i}.ffn")
        ln("enc.ln_f")
        if c.kind == "encoder":
            t = c.max_infill_span
            s["infill.pos"] = ((t, d), "emb")
            s["infill.w1"] = ((3 * d, d), "lin")
            s["infill.b1"] = ((d,), "zeros")
            ln("infill.ln1")
            s["infill.w2"] = ((d, d), "lin")
            s["infill.b2"] = ((d,), "zeros")
            ln("infill.ln2")
            s["length.w"] = ((d, t), "lin")
            s["length.b"] = ((t,), "zeros")
            s["krc.w"] = ((2 * d, 1), "lin")
            s["krc.b"] = ((1,), "zeros")
            s["crf.w"] = ((d, 3), "lin")
            s["crf.b"] = ((3,), "zeros")
            s["crf.trans"] = ((3, 3), "zeros")
            s["crf.start"] = ((3,), "zeros")
            s["crf.stop"] = ((3,), "zeros")
        else:
            s["dec_pos_emb"] = ((c.max_seq_len, d), "emb")
            for i in range(c.n_layers):
                ln(f"dec.{i}.ln1")
                attn(f"dec.{i}.self")
                ln(f"dec.{i}.ln2")
                attn(f"dec.{i}.cross")
                ln(f"dec.{i}.ln3")
                ffn(f"dec.{i}.ffn")
            ln("dec.ln_f")
        return s

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    # -- building blocks --------------------------------------------------
    def _linear(self, x: Tensor, prefix: str, w: str = "w", b: str = "b") -> Tensor:
        return x @ self.params[f"{prefix}.{w}"] + self.params[f"{prefix}.{b}"]

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return T.layer_norm(x, self.params[prefix + ".g"], self.params[prefix + ".b"])

    def _attention(self, xq: Tensor, xkv: Tensor, prefix: str, causal: bool = False) -> Tensor:
        h = self.cfg.n_heads
        dh = self.cfg.d_model // h
        q = self._linear(xq, prefix, "wq", "bq")
        k = xkv @ self.params[prefix + ".wk"]
        v = self._linear(xkv, prefix, "wv", "bv")

        def heads(t: Tensor) -> Tensor:
            lead = t.shape[:-2]
            n = len(lead)
            t = t.reshape(*lead, t.shape[-2], h, dh)
            return t.transpose(*range(n), n + 1, n, n + 2)

        qh, kh, vh = heads(q), heads(k), heads(v)
        nk = kh.ndim
        kt = kh.transpose(*range(nk - 2), nk - 1, nk - 2)
        scores = (qh @ kt) * (1.0 / math.sqrt(dh))
        if causal:
            lq, lk = scores.shape[-2], scores.shape[-1]
            scores = scores + np.triu(np.full((lq, lk), _NEG), k=1)
        ctx = T.softmax(scores, axis=-1) @ vh
        n = ctx.ndim - 3
        ctx = ctx.transpose(*range(n), n + 1, n, n + 2)
        ctx = ctx.reshape(*ctx.shape[:-2], self.cfg.d_model)
        return self._linear(ctx, prefix, "wo", "bo")

    def _ffn(self, x: Tensor, prefix: str) -> Tensor:
        return self._linear(T.gelu(self._linear(x, prefix, "w1", "b1")), prefix, "w2", "b2")

    def vocab_logits(self, x: Tensor) -> Tensor:
        return x @ self.params["tok_emb"].T + self.params["lm_bias"]

    # -- encoder / decoder ------------------------------------------------
    def encode(self, ids: Sequence[int]) -> Tensor:
        """Pre-norm transformer encoder; returns the final layer-normed states [L, d]."""
        ids = np.asarray(ids, dtype=np.int64)
        n = len(ids)
        if n > self.cfg.max_seq_len:
            raise ValueError(f"sequence of length {n} exceeds max_seq_len {self.cfg.max_seq_len}")
        if n == 0:
            raise ValueError("cannot encode an empty sequence")
        x = self.params["tok_emb"][ids] + self.params["pos_emb"][np.arange(n)]
        for i in range(self.cfg.n_layers):
            p = f"enc.{i}"
            hx = self._ln(x, p + ".ln1")
            x = x + self._attention(hx, hx, p + ".attn")
            x = x + self._ffn(self._ln(x, p + ".ln2"), p + ".ffn")
        return self._ln(x, "enc.ln_f")

    def decode_states(self, enc: Tensor, prefix_ids) -> Tensor:
        """Decoder states for ``prefix_ids`` of shape [T] or [B, T]."""
        if self.cfg.kind != "seq2seq":
            raise ValueError("model has no decoder")
        ids = np.asarray(prefix_ids, dtype=np.int64)
        t = ids.shape[-1]
        if t > self.cfg.max_seq_len:
            raise ValueError(f"target of length {t} exceeds max_seq_len {self.cfg.max_seq_len}")
        y = self.params["tok_emb"][ids] + self.params["dec_pos_emb"][np.arange(t)]
        for i in range(self.cfg.n_layers):
            p = f"dec.{i}"
            hy = self._ln(y, p + ".ln1")
            y = y + self._attention(hy, hy, p + ".self", causal=True)
            y = y + self._attention(self._ln(y, p + ".ln2"), enc, p + ".cross")
            y = y + self._ffn(self._ln(y, p + ".ln3"), p + ".ffn")
        return self._ln(y, "dec.ln_f")

    # -- heads ------------------------------------------------------------
    def infill_vectors(self, enc: Tensor, rec: InfillRecord) -> Tensor:
        """Rows y_1..y_z built from both boundary encodings and the relative position embedding."""
        z = rec.true_length
        if not 1 <= z <= self.cfg.max_infill_span:
            raise ValueError(f"span length {z} outside [1, {self.cfg.max_infill_span}]")
        left = enc[[rec.left_boundary] * z]
        right = enc[[rec.right_boundary] * z]
        pos = self.params["infill.pos"][np.arange(z)]
        h = self._ln(T.gelu(self._linear(T.concat([left, right, pos], axis=1), "infill", "w1", "b1")), "infill.ln1")
        return self._ln(T.gelu(self._linear(h, "infill", "w2", "b2")), "infill.ln2")

    def length_logits(self, enc: Tensor, recs: Sequence[InfillRecord]) -> Tensor:
        return self._linear(enc[[r.mask_position for r in recs]], "length")

    def krc_logits(self, enc: Tensor, recs: Sequence[KrcRecord]) -> Tensor:
        left = enc[[r.span_start - 1 for r in recs]]
        right = enc[[r.span_end for r in recs]]
        return self._linear(T.concat([left, right], axis=1), "krc")

    def emissions(self, enc: Tensor) -> Tensor:
        return self._linear(enc, "crf")


# -- losses ---------------------------------------------------------------
def loss_mlm(model: Model, enc: Tensor, recs: Sequence[MlmRecord]) -> Tensor:
    """Mean NLL of the original token at every masked position; 0 when nothing is masked."""
    if not recs:
        return Tensor(0.0)
    logits = model.vocab_logits(enc[[r.position for r in recs]])
    return T.softmax_cross_entropy(logits, [r.original_id for r in recs])


def loss_infill(model: Model, enc: Tensor, recs: Sequence[InfillRecord]) -> Tensor:
    """Per-record mean over the span's tokens, then mean over records."""
    if not recs:
        return Tensor(0.0)
    ys = [model.infill_vectors(enc, r) for r in recs]
    targets: list[int] = []
    weights: list[float] = []
    for r in recs:
        targets.extend(r.original_tokens)
        weights.extend([1.0 / (r.true_length * len(recs))] * r.true_length)
    logits = model.vocab_logits(T.concat(ys, axis=0) if len(ys) > 1 else ys[0])
    return T.softmax_cross_entropy(logits, targets, weights)


def loss_length(model: Model, enc: Tensor, recs: Sequence[InfillRecord]) -> Tensor:
    """Span length classification; class k-1 encodes length k."""
    if not recs:
        return Tensor(0.0)
    t = model.cfg.max_infill_span
    for r in recs:
        if not 1 <= r.true_length <= t:
            raise ValueError(f"span length {r.true_length} outside [1, {t}]")
    return T.softmax_cross_entropy(model.length_logits(enc, recs), [r.true_length - 1 for r in recs])


def loss_krc(model: Model, enc: Tensor, recs: Sequence[KrcRecord]) -> Tensor:
    if not recs:
        return Tensor(0.0)
    n = enc.shape[0]
    for r in recs:
        if r.span_start < 1 or r.span_end > n - 1:
            raise IndexError(f"span [{r.span_start}, {r.span_end}) has no boundary token inside the sequence")
    return T.bce_with_logits(model.krc_logits(enc, recs), [r.label for r in recs])


def combine_losses(parts: Mapping[str, Tensor | float], w: LossWeights):
    """alpha*mlm + gamma*infill + sigma*length + delta*krc; missing parts count as 0."""
    total = 0.0
    for name, coef in zip(COMPONENTS, (w.alpha, w.gamma, w.sigma, w.delta)):
        if name in parts:
            total = total + coef * parts[name]
    return total


def kbir_parts(model: Model, ex: KbirExample, w: LossWeights | None = None) -> dict[str, Tensor]:
    """Each loss component of one example; components with zero weight are skipped."""
    enc = model.encode(ex.perturbed)
    want = w.as_dict() if w is not None else dict.fromkeys(COMPONENTS, 1.0)
    parts: dict[str, Tensor] = {}
    if want["mlm"] > 0:
        parts["mlm"] = loss_mlm(model, enc, ex.mlm)
    if want["infill"] > 0:
        parts["infill"] = loss_infill(model, enc, ex.infill)
    if want["length"] > 0:
        parts["length"] = loss_length(model, enc, ex.infill)
    if want["krc"] > 0:
        parts["krc"] = loss_krc(model, enc, ex.krc)
    return parts


def loss_kbir(model: Model, ex: KbirExample, w: LossWeights = KBIR_WEIGHTS) -> Tensor:
    return as_tensor_loss(combine_losses(kbir_parts(model, ex, w), w))


def as_tensor_loss(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(float(x))


def loss_seq2seq(model: Model, ex: KeyBartExample) -> Tensor:
    """Teacher-forced mean cross-entropy over target positions 1..end."""
    tgt = ex.target
    if len(tgt) < 2 or tgt[0] != BOS or tgt[-1] != EOS:
        raise ValueError("target must start with BOS and end with EOS")
    enc = model.encode(ex.input)
    states = model.decode_states(enc, tgt[:-1])
    return T.softmax_cross_entropy(model.vocab_logits(states), tgt[1:])


# -- CRF ------------------------------------------------------------------
def crf_path_score(emissions: Tensor, tags: Sequence[int], trans: Tensor, start: Tensor, stop: Tensor) -> Tensor:
    tags = np.asarray(tags, dtype=np.int64)
    n = len(tags)
    s = start[int(tags[0])] + emissions[(np.arange(n), tags)].sum() + stop[int(tags[-1])]
    if n > 1:
        s = s + trans[(tags[:-1], tags[1:])].sum()
    return s


def crf_log_partition(emissions: Tensor, trans: Tensor, start: Tensor, stop: Tensor) -> Tensor:
    """Forward algorithm in log space."""
    n = emissions.shape[0]
    k = emissions.shape[1]
    alpha = start + emissions[0]
    for i in range(1, n):
        alpha = T.logsumexp(alpha.reshape(k, 1) + trans, axis=0) + emissions[i]
    return T.logsumexp(alpha + stop, axis=0)


def viterbi(emissions: np.ndarray, trans: np.ndarray, start: np.ndarray, stop: np.ndarray) -> list[int]:
    """Best tag path; ties resolve toward the lower tag index (B < I < O)."""
    emissions = np.asarray(emissions, dtype=np.float64)
    n, k = emissions.shape
    score = start + emissions[0]
    back = np.zeros((n, k), dtype=np.int64)
    for i in range(1, n):
        cand = score[:, None] + trans
        back[i] = np.argmax(cand, axis=0)
        score = cand[back[i], np.arange(k)] + emissions[i]
    best = int(np.argmax(score + stop))
    path = [best]
    for i in range(n - 1, 0, -1):
        best = int(back[i, best])
        path.append(best)
    return path[::-1]


def crf_log_likelihood(model: Model, enc: Tensor, tags: Sequence[int]) -> Tensor:
    """Negative per-token log-likelihood of ``tags``: (logZ - score) / L."""
    if len(tags) != enc.shape[0]:
        raise ValueError("need one tag per token")
    em = model.emissions(enc)
    p = model.params
    score = crf_path_score(em, tags, p["crf.trans"], p["crf.start"], p["crf.stop"])
    log_z = crf_log_partition(em, p["crf.trans"], p["crf.start"], p["crf.stop"])
    return (log_z - score) * (1.0 / len(tags))


def crf_viterbi(model: Model, enc: Tensor) -> list[int]:
    p = model.params
    return viterbi(model.emissions(enc).data, p["crf.trans"].data, p["crf.start"].data, p["crf.stop"].data)


def tag_document(model: Model, ids: Sequence[int]) -> list[int]:
    with T.no_grad():
        return crf_viterbi(model, model.encode(ids))


# -- generation -----------------------------------------------------------
def beam_search(
    model: Model, input_ids: Sequence[int], beam: int = 1, max_len: int = 40, length_penalty: float = 1.0
) -> list[int]:
    """Generated token ids (BOS dropped, EOS kept when produced).

    Hypotheses are ranked at the end by cumulative log-probability divided by
    length**length_penalty. Search stops when every kept hypothesis has
    ended, at ``max_len``, or once ``beam`` hypotheses have finished and the
    best live one already trails the best finished one. With ``beam == 1``
    this is the greedy rollout.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")

    def norm(item):
        seq, score = item
        return score / (len(seq) ** length_penalty)

    with T.no_grad():
        enc = model.encode(input_ids)
        live: list[tuple[list[int], float]] = [([], 0.0)]
        finished: list[tuple[list[int], float]] = []
        max_len = min(max_len, model.cfg.max_seq_len)
        for _ in range(max_len):
            prefixes = np.array([[BOS, *seq] for seq, _ in live], dtype=np.int64)
            states = model.decode_states(enc, prefixes)
            logits = model.vocab_logits(states[:, -1, :]).data
            logp = logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)
            total = np.array([s for _, s in live])[:, None] + logp
            flat = total.reshape(-1)
            # stable: equal scores keep the lower (hypothesis, token) index
            order = np.argsort(-flat, kind="stable")[:beam]
            v = logp.shape[1]
            nxt = []
            for o in order:
                b, tok = divmod(int(o), v)
                seq = live[b][0] + [tok]
                if tok == EOS:
                    finished.append((seq, float(flat[o])))
                else:
                    nxt.append((seq, float(flat[o])))
            live = nxt
            if not live:
                break
            if len(finished) >= beam and max(map(norm, live)) < max(map(norm, finished)):
                break
        # truncated hypotheses only compete when nothing reached EOS
        pool = finished or live
    best = max(enumerate(pool), key=lambda it: (norm(it[1]), -it[0]))[1]
    return best[0]


def split_catseq_ids(ids: Sequence[int], vocab: Vocabulary) -> list[str]:
    """Phrases of a generated id sequence: split on KP_SEP, specials dropped, normalized, deduplicated."""
    phrases: list[str] = []
    cur: list[int] = []
    for t in list(ids) + [KP_SEP]:
        t = int(t)
        if t == KP_SEP or t == EOS:
            if cur:
                p = normalize(decode(cur, vocab))
                if p and p not in phrases:
                    phrases.append(p)
            cur = []
            if t == EOS:
                break
        elif t >= N_SPECIAL:
            cur.append(t)
    return phrases


def decode_catseq(
    model: Model, input_ids: Sequence[int], vocab: Vocabulary, beam: int = 1, max_len: int = 40
) -> list[str]:
    return split_catseq_ids(beam_search(model, input_ids, beam, max_len), vocab)


# -- checkpoints ----------------------------------------------------------
MAGIC = b"KBFG"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Model, path: str | Path, meta: Mapping | None = None) -> None:
    """Binary checkpoint, written atomically (temp file then rename)."""
    blob = json.dumps({"model": asdict(model.cfg), "meta": dict(meta or {})}, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<Q", len(blob)), blob]
    for name, p in model.params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<Q", p.data.ndim))
        chunks.append(struct.pack(f"<{p.data.ndim}Q", *p.data.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(b"".join(chunks))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | Path) -> tuple[Model, dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<Q", data, 8)
    off = 16
    header = json.loads(data[off : off + n].decode("utf-8"))
    off += n
    params: dict[str, np.ndarray] = {}
    try:
        while off < len(data):
            (k,) = struct.unpack_from("<Q", data, off)
            off += 8
            name = data[off : off + k].decode("utf-8")
            off += k
            (rank,) = struct.unpack_from("<Q", data, off)
            off += 8
            dims = struct.unpack_from(f"<{rank}Q", data, off)
            off += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(dims)
            off += 4 * count
            params[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    cfg = ModelConfig(**header["model"])
    return Model(cfg, params), header.get("meta", {})
