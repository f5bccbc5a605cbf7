import itertools
import math
import struct

import numpy as np
import pytest

import oracles
from kbir_forge import tensor as T
from kbir_forge.model import (
    CHECKPOINT_VERSION,
    KBI_WEIGHTS,
    KBIR_WEIGHTS,
    MAGIC,
    MLM_WEIGHTS,
    CheckpointError,
    LossWeights,
    Model,
    ModelConfig,
    beam_search,
    combine_losses,
    crf_log_likelihood,
    crf_log_partition,
    crf_path_score,
    crf_viterbi,
    decode_catseq,
    kbir_parts,
    load_checkpoint,
    loss_infill,
    loss_kbir,
    loss_krc,
    loss_length,
    loss_mlm,
    loss_seq2seq,
    save_checkpoint,
    split_catseq_ids,
    viterbi,
)
from kbir_forge.perturb import InfillRecord, KbirExample, KeyBartExample, KrcRecord, MlmRecord
from kbir_forge.tokenizer import BOS, EOS, KP_SEP, build_vocab
from kbir_forge.train import Adam
from kbir_forge.verify import Fixture

V = 64


def model(kind="encoder", vocab=V, d=16, seed=0, **kw):
    return Model(ModelConfig(vocab_size=vocab, d_model=d, n_layers=2, n_heads=2, max_seq_len=32, kind=kind, init_seed=seed, **kw))


def zero(m, *names):
    for n in names:
        m[n].data = np.zeros_like(m[n].data)


def ids(n, seed=0):
    return list(np.random.default_rng(seed).integers(6, V, size=n))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, d_model=10, n_heads=3)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, max_infill_span=0)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, dropout=0.1)
    assert ModelConfig(vocab_size=10, d_model=8).ffn_dim == 32


def test_encoder_shape_and_limits():
    m = model()
    assert m.encode(ids(7)).shape == (7, 16)
    with pytest.raises(ValueError):
        m.encode(ids(33))
    with pytest.raises(ValueError):
        m.encode([])


def test_encoder_is_permutation_equivariant_without_positions():
    m = model()
    zero(m, "pos_emb")
    x = ids(6, seed=3)
    y = list(x)
    y[1], y[4] = y[4], y[1]
    a, b = m.encode(x).data, m.encode(y).data
    np.testing.assert_allclose(b[[0, 4, 2, 3, 1, 5]], a, atol=1e-12)


def test_infill_vectors():
    m = model()
    enc = m.encode(ids(5))
    assert m.infill_vectors(enc, InfillRecord(2, (9,), 2, 3)).shape == (1, 16)
    y = m.infill_vectors(enc, InfillRecord(2, (9, 10), 2, 4)).data
    assert np.linalg.norm(y[0] - y[1]) > 0
    with pytest.raises(ValueError):
        m.infill_vectors(enc, InfillRecord(2, tuple(range(11)), 2, 13))


def test_empty_records_give_zero():
    m = model()
    enc = m.encode(ids(5))
    assert loss_mlm(m, enc, []).item() == 0.0
    assert loss_infill(m, enc, []).item() == 0.0
    assert loss_length(m, enc, []).item() == 0.0
    assert loss_krc(m, enc, []).item() == 0.0


def test_uniform_logits_give_log_v():
    m = model()
    zero(m, "tok_emb", "lm_bias", "length.w", "length.b", "krc.w", "krc.b")
    enc = m.encode(ids(6))
    assert abs(loss_mlm(m, enc, [MlmRecord(2, 7)]).item() - math.log(V)) < 1e-6
    rec = InfillRecord(2, (11,), 2, 3)
    assert abs(loss_infill(m, enc, [rec]).item() - math.log(V)) < 1e-6
    assert abs(loss_length(m, enc, [rec]).item() - math.log(10)) < 1e-12
    krc = [KrcRecord(1, 2, 0, "a"), KrcRecord(3, 4, 1, "b", "c")]
    assert abs(loss_krc(m, enc, krc).item() - math.log(2)) < 1e-12


def test_random_init_losses_are_near_ceiling():
    m = model()
    enc = m.encode(ids(6))
    val = loss_infill(m, enc, [InfillRecord(2, (11,), 2, 3)]).item()
    assert 0 < val < 2 * math.log(V)


def test_length_class_encoding():
    m = model()
    zero(m, "length.w")
    m["length.b"].data = np.arange(10.0) * 0
    m["length.b"].data[2] = 50.0
    enc = m.encode(ids(6))
    assert loss_length(m, enc, [InfillRecord(2, (7, 8, 9), 2, 5)]).item() < 1e-12


def test_length_out_of_range():
    m = model()
    enc = m.encode(ids(6))
    with pytest.raises(ValueError):
        loss_length(m, enc, [InfillRecord(2, tuple(range(11)), 2, 13)])


def test_krc_boundary_out_of_range():
    m = model()
    enc = m.encode(ids(4))
    with pytest.raises(IndexError):
        loss_krc(m, enc, [KrcRecord(0, 1, 0, "a")])
    with pytest.raises(IndexError):
        loss_krc(m, enc, [KrcRecord(2, 4, 0, "a")])


def test_combine_losses():
    parts = dict.fromkeys(("mlm", "infill", "length", "krc"), 1.0)
    assert combine_losses(parts, KBIR_WEIGHTS) == pytest.approx(4.33, abs=1e-12)
    assert combine_losses({"mlm": 0.7, "infill": 5.0}, MLM_WEIGHTS) == 0.7
    double = {k: 2 * v for k, v in {"mlm": 0.3, "infill": 1.1, "length": 0.9, "krc": 0.2}.items()}
    half = {k: v / 2 for k, v in double.items()}
    assert combine_losses(double, KBIR_WEIGHTS) == 2 * combine_losses(half, KBIR_WEIGHTS)
    with pytest.raises(ValueError):
        LossWeights(0, 0, 0, 0)


def test_heads_match_numpy_reference():
    fx = Fixture(0)
    m = fx.model("encoder")
    ex = fx.kbir_example
    parts = kbir_parts(m, ex)
    enc = m.encode(ex.perturbed).data
    ref = oracles.head_losses({k: p.data for k, p in m.params.items()}, enc, ex)
    for k in ref:
        assert parts[k].item() == pytest.approx(ref[k], rel=1e-12, abs=1e-12), k


def test_nesting_is_bit_identical():
    fx = Fixture(1)
    m = fx.model("encoder")
    ex = fx.kbir_example
    p = kbir_parts(m, ex)
    mlm, inf, ln, krc = (p[k].item() for k in ("mlm", "infill", "length", "krc"))
    assert loss_kbir(m, ex, MLM_WEIGHTS).item() == mlm
    assert loss_kbir(m, ex, KBI_WEIGHTS).item() == mlm + 0.33 * inf + 1.0 * ln
    assert loss_kbir(m, ex, KBIR_WEIGHTS).item() == mlm + 0.33 * inf + 1.0 * ln + 2.0 * krc


def test_infill_memorization():
    m = model()
    ex = KbirExample([10, 11, 2, 12, 13], infill=[InfillRecord(2, (20, 21, 22), 2, 5)])
    opt = Adam(m.parameters())
    for _ in range(500):
        m.zero_grad()
        loss = loss_infill(m, m.encode(ex.perturbed), ex.infill)
        loss.backward()
        opt.step(1e-2)
    assert loss_infill(m, m.encode(ex.perturbed), ex.infill).item() < 0.05


def test_seq2seq_degenerate_and_uniform():
    m = model("seq2seq")
    zero(m, "tok_emb", "lm_bias")
    assert abs(loss_seq2seq(m, KeyBartExample(ids(5), [BOS, EOS])).item() - math.log(V)) < 1e-6
    assert abs(loss_seq2seq(m, KeyBartExample(ids(5), [BOS, 9, 10, EOS])).item() - math.log(V)) < 1e-6
    with pytest.raises(ValueError):
        loss_seq2seq(m, KeyBartExample(ids(5), [9, EOS]))
    with pytest.raises(ValueError):
        model().decode_states(model().encode(ids(3)), [BOS])


def test_decoder_is_causal():
    m = model("seq2seq")
    enc = m.encode(ids(5))
    a = [BOS, 10, 11, 12, 13]
    b = [BOS, 10, 11, 40, 41]
    sa, sb = m.decode_states(enc, a).data, m.decode_states(enc, b).data
    np.testing.assert_array_equal(sa[:3], sb[:3])
    assert not np.allclose(sa[3], sb[3])


def test_decoder_batches_match_single():
    m = model("seq2seq")
    enc = m.encode(ids(5))
    batch = m.decode_states(enc, [[BOS, 7, 8], [BOS, 9, 9]]).data
    np.testing.assert_allclose(batch[1], m.decode_states(enc, [BOS, 9, 9]).data, atol=1e-12)


# -- CRF ------------------------------------------------------------------
def crf_case(n, seed):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, 3)), rng.normal(size=(3, 3)), rng.normal(size=3), rng.normal(size=3)


def test_crf_base_case():
    em, tr, st, sp = crf_case(1, 0)
    got = crf_log_partition(T.Tensor(em), T.Tensor(tr), T.Tensor(st), T.Tensor(sp)).item()
    s = st + em[0] + sp
    assert got == pytest.approx(np.log(np.exp(s).sum()), abs=1e-12)


@pytest.mark.parametrize("n", [1, 2, 3, 4, 5])
def test_crf_against_enumeration(n):
    em, tr, st, sp = crf_case(n, n)
    z = crf_log_partition(T.Tensor(em), T.Tensor(tr), T.Tensor(st), T.Tensor(sp)).item()
    assert abs(z - oracles.crf_log_partition(em, tr, st, sp)) < 1e-8
    assert viterbi(em, tr, st, sp) == oracles.crf_argmax(em, tr, st, sp)
    total = 0.0
    for path in itertools.product(range(3), repeat=n):
        s = crf_path_score(T.Tensor(em), path, T.Tensor(tr), T.Tensor(st), T.Tensor(sp)).item()
        total += math.exp(s - z)
    assert abs(total - 1) < 1e-8


def test_viterbi_prefers_o_and_breaks_ties_low():
    n = 4
    em = np.zeros((n, 3))
    em[:, 2] = 5.0
    assert viterbi(em, np.zeros((3, 3)), np.zeros(3), np.zeros(3)) == [2] * n
    assert viterbi(np.zeros((n, 3)), np.zeros((3, 3)), np.zeros(3), np.zeros(3)) == [0] * n


def test_crf_loss_is_normalized_per_token():
    m = model()
    x = ids(5)
    enc = m.encode(x)
    tags = [0, 1, 2, 2, 0]
    em = m.emissions(enc).data
    p = {k: m[k].data for k in ("crf.trans", "crf.start", "crf.stop")}
    ref = oracles.crf_log_partition(em, p["crf.trans"], p["crf.start"], p["crf.stop"]) - oracles.crf_path_score(
        em, p["crf.trans"], p["crf.start"], p["crf.stop"], tags
    )
    assert crf_log_likelihood(m, enc, tags).item() == pytest.approx(ref / 5, abs=1e-10)
    assert len(crf_viterbi(m, enc)) == 5
    with pytest.raises(ValueError):
        crf_log_likelihood(m, enc, tags[:3])


# -- generation -----------------------------------------------------------
def step_logp(m, enc, prefix):
    logits = m.vocab_logits(m.decode_states(enc, [BOS, *prefix])[-1:]).data[0]
    return logits - np.logaddexp.reduce(logits)


def test_greedy_matches_hand_rollout():
    m = model("seq2seq", vocab=12, seed=4)
    x = [6, 7, 8, 9]
    enc = m.encode(x)
    out = []
    for _ in range(3):
        t = int(np.argmax(step_logp(m, enc, out)))
        out.append(t)
        if t == EOS:
            break
    assert beam_search(m, x, beam=1, max_len=3) == out


def test_full_beam_equals_exhaustive_two_step_search():
    vocab = 9
    for seed in range(5):
        m = model("seq2seq", vocab=vocab, seed=seed)
        m["lm_bias"].data[EOS] = 1.5  # make early stops competitive
        x = [6, 7, 8]
        enc = m.encode(x)
        first = step_logp(m, enc, [])
        cands = [([EOS], first[EOS])]
        for a in range(vocab):
            if a == EOS:
                continue
            second = step_logp(m, enc, [a])
            cands += [([a, b], first[a] + second[b]) for b in range(vocab)]
        best = max(cands, key=lambda c: c[1] / len(c[0]))[0]
        assert beam_search(m, x, beam=vocab * vocab, max_len=2) == best


def test_overfit_single_example_decodes_exactly():
    vocab = build_vocab(["a b c d e f g h"])
    v = vocab.id
    tgt = [BOS, v("b"), v("c"), KP_SEP, v("f"), EOS]
    ex = KeyBartExample([v("a"), v("b"), v("c"), v("d"), v("e"), v("f")], tgt)
    m = model("seq2seq", vocab=vocab.size)
    opt = Adam(m.parameters())
    for _ in range(300):
        m.zero_grad()
        loss_seq2seq(m, ex).backward()
        opt.step(1e-2)
    assert decode_catseq(m, ex.input, vocab, beam=1) == ["b c", "f"]
    assert decode_catseq(m, ex.input, vocab, beam=4) == ["b c", "f"]


def test_catseq_postprocessing():
    vocab = build_vocab(["a"])
    a = vocab.id("a")
    assert split_catseq_ids([a, KP_SEP, a, EOS], vocab) == ["a"]
    assert split_catseq_ids([KP_SEP, EOS], vocab) == []
    assert split_catseq_ids([a, EOS, a, KP_SEP, 7], vocab) == ["a"]


def test_beam_must_be_positive():
    with pytest.raises(ValueError):
        beam_search(model("seq2seq"), [6, 7], beam=0)


# -- checkpoints ----------------------------------------------------------
def test_checkpoint_round_trip(tmp_path):
    m = model("seq2seq")
    save_checkpoint(m, tmp_path / "m.kbfg", {"step": 3})
    back, meta = load_checkpoint(tmp_path / "m.kbfg")
    assert meta == {"step": 3} and back.cfg == m.cfg
    for k in m.params:
        np.testing.assert_array_equal(back[k].data, m[k].data.astype(np.float32))
    assert list(tmp_path.iterdir()) == [tmp_path / "m.kbfg"]


def test_checkpoint_layout(tmp_path):
    m = model()
    save_checkpoint(m, tmp_path / "m.kbfg")
    raw = (tmp_path / "m.kbfg").read_bytes()
    assert raw[:4] == MAGIC
    assert struct.unpack_from("<I", raw, 4)[0] == CHECKPOINT_VERSION
    (n,) = struct.unpack_from("<Q", raw, 8)
    off = 16 + n
    (k,) = struct.unpack_from("<Q", raw, off)
    assert raw[off + 8 : off + 8 + k] == b"tok_emb"
    rank, d0, d1 = struct.unpack_from("<3Q", raw, off + 8 + k)
    assert (rank, d0, d1) == (2, V, 16)


def test_checkpoint_rejects_bad_files(tmp_path):
    m = model()
    save_checkpoint(m, tmp_path / "m.kbfg")
    raw = (tmp_path / "m.kbfg").read_bytes()
    (tmp_path / "magic").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "version").write_bytes(raw[:4] + struct.pack("<I", 99) + raw[8:])
    (tmp_path / "short").write_bytes(raw[:-10])
    for name in ("magic", "version", "short"):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / name)
