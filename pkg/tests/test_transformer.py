import math

import numpy as np
import pytest
import torch

from relaydec.errors import CapacityError, ConfigError, DataError, ShapeError
from relaydec.tokenization import build_vocab
from relaydec.transformer import (
    PackingSettings,
    TrainSettings,
    TransformerConfig,
    TransformerLM,
    batches,
    corpus_cross_entropy,
    encode_corpus,
    frame,
    lm_loss,
    load_lm,
    pack_documents,
    pad_batch,
    pretrain_lm,
    save_lm,
)


def small(vocab=11, d=16, layers=2, heads=4, seq=24, seed=0):
    return TransformerLM(TransformerConfig(vocab, d, layers, heads, 4 * d, seq), seed=seed)


def test_config_validation():
    with pytest.raises(ConfigError):
        TransformerConfig(10, d_model=10, n_heads=3)
    with pytest.raises(ConfigError):
        TransformerConfig(0)
    with pytest.raises(ConfigError):
        TransformerConfig(10, max_seq_len=1)


@pytest.mark.parametrize("cfg", [
    TransformerConfig(11, 16, 2, 4, 64, 24),
    TransformerConfig(57, 64, 2, 4, 256, 64),
    TransformerConfig(5, 2, 1, 1, 2, 4),
    TransformerConfig(30, 32, 3, 8, 48, 100),
])
def test_parameter_count_closed_form(cfg):
    model = TransformerLM(cfg)
    assert cfg.parameter_count() == sum(p.numel() for p in model.parameters())


def test_embed_shapes_and_table_lookup():
    m = small()
    assert m.embed([]).shape == (0, 16)
    with torch.no_grad():
        m.pos_emb.zero_()
    assert torch.equal(m.embed([7]), m.tok_emb[7:8])
    assert torch.equal(m.embed([3, 4], offset=5), m.embed([3, 4], offset=5))


def test_embed_capacity_and_range():
    m = small(seq=8)
    with pytest.raises(CapacityError):
        m.embed([4] * 5, offset=4)
    with pytest.raises(ShapeError):
        m.embed([11])


def test_forward_shapes():
    m = small()
    ids = torch.tensor([1, 5, 6, 7, 8, 9, 2])
    assert m.forward_hidden(ids).shape == (7, 16)
    assert m.forward_logits(ids).shape == (7, 11)
    assert m.forward_logits(ids[None].repeat(3, 1)).shape == (3, 7, 11)


def test_token_mode_equals_embedding_mode():
    m = small()
    ids = torch.tensor([[1, 4, 5, 6, 2], [1, 7, 7, 3, 2]])
    assert torch.allclose(m.forward_logits(ids), m.forward_logits(m.embed(ids)), atol=1e-6)


def test_logit_rows_finite_and_normalizable():
    m = small()
    logits = m.forward_logits(torch.tensor([1, 4, 5, 2]))
    assert torch.isfinite(logits).all()
    assert torch.allclose(torch.softmax(logits, -1).sum(-1), torch.ones(4), atol=1e-6)


def test_causality_perturbation_sweep():
    m = small(seed=3)
    g = torch.Generator().manual_seed(0)
    ids = torch.randint(4, 11, (12,), generator=g)
    base = m.forward_logits(ids)
    for j in range(12):
        pert = ids.clone()
        pert[j:] = torch.randint(4, 11, (12 - j,), generator=g)
        out = m.forward_logits(pert)
        assert torch.allclose(out[:j], base[:j], atol=1e-6), j


def test_kv_cache_matches_full_pass():
    m = small(seed=4)
    x = m.embed(torch.tensor([[1, 4, 5, 6, 7, 8, 9]]))
    full = m.run(x)
    cache: list = []
    parts = [m.run(x[:, :3], cache)]
    for i in range(3, 7):
        parts.append(m.run(x[:, i:i + 1], cache))
    assert torch.allclose(torch.cat(parts, 1), full, atol=1e-5)


def test_run_capacity():
    m = small(seq=6)
    with pytest.raises(CapacityError):
        m.run(torch.zeros(1, 7, 16))
    with pytest.raises(ShapeError):
        m.run(torch.zeros(1, 3, 5))


# -- hand-computed oracle -------------------------------------------------------------


def _np_ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return g * (x - mu) / np.sqrt(var + eps) + b


def _np_gelu(x):
    return 0.5 * x * (1 + np.vectorize(math.erf)(x / math.sqrt(2)))


def test_hand_built_one_layer_model():
    cfg = TransformerConfig(5, d_model=2, n_layers=1, n_heads=1, d_ff=2, max_seq_len=4)
    m = TransformerLM(cfg).double()
    rng = np.random.default_rng(11)
    with torch.no_grad():
        for p in m.parameters():
            p.copy_(torch.from_numpy(rng.normal(size=tuple(p.shape))))
    P = {k: v.detach().numpy() for k, v in m.state_dict().items()}

    ids = [3, 1]
    x = P["tok_emb"][ids] + P["pos_emb"][:2]
    h = _np_ln(x, P["blocks.0.ln1.gain"], P["blocks.0.ln1.bias"])

    def lin(name, v):
        return v @ P[f"{name}.weight"].T + P[f"{name}.bias"]

    q, k, v = (lin(f"blocks.0.attn.{n}_proj", h) for n in "qkv")
    scores = q @ k.T / math.sqrt(2)
    scores[0, 1] = -np.inf
    w = np.exp(scores - scores.max(1, keepdims=True))
    w /= w.sum(1, keepdims=True)
    x = x + lin("blocks.0.attn.o_proj", w @ v)
    h2 = _np_ln(x, P["blocks.0.ln2.gain"], P["blocks.0.ln2.bias"])
    x = x + lin("blocks.0.ff_out", _np_gelu(lin("blocks.0.ff_in", h2)))
    hidden = _np_ln(x, P["ln_f.gain"], P["ln_f.bias"])
    logits = hidden @ P["lm_head.weight"].T

    got_h = m.forward_hidden(torch.tensor(ids)).detach().numpy()
    got_l = m.forward_logits(torch.tensor(ids)).detach().numpy()
    assert np.max(np.abs(got_h - hidden)) < 1e-5
    assert np.max(np.abs(got_l - logits)) < 1e-5


# -- training --------------------------------------------------------------------------


def test_initial_loss_is_log_vocab():
    m = small(vocab=40, seed=9)
    g = torch.Generator().manual_seed(1)
    ids = torch.randint(4, 40, (8, 16), generator=g)
    assert abs(lm_loss(m, ids).item() / math.log(40) - 1) < 0.05


def test_one_step_keeps_loss_finite():
    vocab = build_vocab(["a b c d", "c d e"])
    m = TransformerLM(TransformerConfig(len(vocab), 16, 1, 2, 32, 16))
    res = pretrain_lm(m, vocab, ["a b c d", "c d e"], TrainSettings(steps=1, batch_size=2, warmup=0))
    assert math.isfinite(res.losses[0])
    assert all(torch.isfinite(p).all() for p in m.parameters())


def test_pretraining_is_deterministic_and_lowers_loss():
    sents = ["a b c", "b c d e", "e a", "d d c b a", "c a e"]
    vocab = build_vocab(sents)
    states = []
    for _ in range(2):
        m = TransformerLM(TransformerConfig(len(vocab), 16, 1, 2, 32, 16), seed=4)
        before = corpus_cross_entropy(m, vocab, sents)
        res = pretrain_lm(m, vocab, sents, TrainSettings(steps=150, batch_size=4, lr=3e-3, warmup=10, seed=2))
        states.append({k: v.clone() for k, v in m.state_dict().items()})
        assert corpus_cross_entropy(m, vocab, sents) < 0.6 * before
        assert len(res.losses) == len(res.lrs) == 150
    assert all(torch.equal(states[0][k], states[1][k]) for k in states[0])


def test_encode_corpus_reports_long_line():
    vocab = build_vocab(["a b c d e f"])
    with pytest.raises(DataError, match="line 2"):
        encode_corpus(vocab, ["a", "a b c d e f"], max_seq_len=6)


def test_batches_cover_each_index_once_per_epoch():
    g = torch.Generator().manual_seed(0)
    lengths = [3, 9, 4, 4, 7, 1, 2, 8, 5, 6]
    stream = batches(lengths, 3, g, bucket=2)
    seen = []
    while len(seen) < len(lengths):
        seen.extend(next(stream))
    assert sorted(seen) == list(range(10))


def test_pad_batch_and_frame():
    assert frame([5, 6]) == [1, 5, 6, 2]
    assert pad_batch([[1, 2], [3]]).tolist() == [[1, 2], [3, 0]]


def test_pack_documents():
    vocab = build_vocab(["a b", "c d e"], extra=["###", "[LangA]:", "[LangB]:"])
    rows = [frame(vocab.encode(s)) for s in ("a b", "c d e")]
    pk = PackingSettings(3, 0.7, 0.5, 200, ("### [LangA]:", "### [LangB]:"))
    docs = pack_documents(rows, vocab, pk, seed=1, max_len=12)
    assert docs == pack_documents(rows, vocab, pk, seed=1, max_len=12)
    assert len(docs) == 200 and all(0 < len(d) <= 12 for d in docs)
    flat = [t for d in docs for t in d]
    assert vocab.index["###"] in flat and vocab.index["[LangB]:"] in flat
    plain = pack_documents(rows, vocab, PackingSettings(1, 0.0, 0.0, 50), seed=1, max_len=12)
    assert all(d in rows for d in plain)
    with pytest.raises(ConfigError):
        PackingSettings(repeat_prob=1.5)


def test_save_load_round_trip(tmp_path):
    vocab = build_vocab(["a b c"])
    m = TransformerLM(TransformerConfig(len(vocab), 16, 1, 2, 32, 16), seed=5)
    save_lm(tmp_path / "lm.ckpt", m, vocab)
    m2, v2, cfg = load_lm(tmp_path / "lm.ckpt")
    assert v2 == vocab and cfg["kind"] == "lm"
    ids = torch.tensor([1, 4, 5, 2])
    assert torch.equal(m.forward_logits(ids), m2.forward_logits(ids))
    save_lm(tmp_path / "again.ckpt", m2, v2)
    assert (tmp_path / "lm.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()
