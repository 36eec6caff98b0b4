import math

import numpy as np
import pytest

from cnnattn import numkernel as nk
from cnnattn.embed import EmbeddingMatrix
from cnnattn.model import (WIDTHS, ModelInputError, batch_arrays, batch_loss, forward_attn, forward_max,
                           init_params, load_checkpoint, predict, save_checkpoint)
from cnnattn.textpipe import MAX_LEN, PAD_ID, EncodedNarrative, build_vocab, encode

WORDS = [f"w{i}" for i in range(12)]


@pytest.fixture(scope="module")
def vocab():
    return build_vocab([WORDS], min_doc_freq=1)


def embedding(vocab, dim=6, seed=0):
    rng = np.random.default_rng(seed)
    vecs = rng.normal(0, 0.5, size=(len(vocab), dim))
    vecs[PAD_ID] = 0.0
    return EmbeddingMatrix(vocab.hash, vecs, "cbow")


def params_for(vocab, head, seed=0, n_filters=5, dim=6):
    p = init_params(vocab, embedding(vocab, dim, seed), head, seed=seed, n_filters=n_filters)
    rng = np.random.default_rng(seed + 100)
    # nonzero biases and a live query so the oracle exercises every term
    for k, t in p.tensors.items():
        if k.endswith("_b"):
            t.data = rng.normal(0, 0.1, size=t.shape)
    if head == "attn":
        p.tensors["query"].data = rng.normal(0, 1.0, size=n_filters)
    return p


def narrative(vocab, n, seed=0, max_len=MAX_LEN):
    rng = np.random.default_rng(seed)
    return encode(list(rng.choice(WORDS, n)), vocab, max_len=max_len)


def oracle_logit(p, x):
    """Loop-by-loop forward over real tokens only, written without numkernel."""
    a = {k: t.data for k, t in p.tensors.items()}
    n = x.n_valid
    E = [[float(v) for v in a["embedding"][x.ids[i]]] for i in range(n)]
    F = a["conv1_b"].shape[0]
    maps = []
    for w in WIDTHS:
        W, b = a[f"conv{w}_w"], a[f"conv{w}_b"]
        rows = []
        for pos in range(n):
            row = []
            for f in range(F):
                s = float(b[f])
                for k in range(w):
                    if pos + k < n:
                        s += sum(E[pos + k][e] * float(W[k, e, f]) for e in range(len(E[0])))
                row.append(max(s, 0.0))
            rows.append(row)
        maps.append(rows)
    if p.head == "max":
        feat = [max(r[f] for r in m) for m in maps for f in range(F)]
    else:
        H = [r for m in maps for r in m]
        q = a["query"]
        scores = [sum(h[f] * float(q[f]) for f in range(F)) / math.sqrt(F) for h in H]
        top = max(scores)
        ex = [math.exp(s - top) for s in scores]
        z = math.fsum(ex)
        feat = [math.fsum(ex[i] / z * H[i][f] for i in range(len(H))) for f in range(F)]
    return float(a["out_b"]) + math.fsum(feat[i] * float(a["out_w"][i]) for i in range(len(feat)))


@pytest.mark.parametrize("head", ["max", "attn"])
@pytest.mark.parametrize("n", [1, 2, 7, 20])
def test_forward_matches_loop_oracle(vocab, head, n):
    p = params_for(vocab, head, seed=n)
    x = narrative(vocab, n, seed=n, max_len=40)
    pred = (forward_max if head == "max" else forward_attn)(x, p)
    assert pred.logit == pytest.approx(oracle_logit(p, x), abs=1e-6)
    assert pred.probability == pytest.approx(1 / (1 + math.exp(-pred.logit)), abs=1e-12)


@pytest.mark.parametrize("head", ["max", "attn"])
def test_dead_network_gives_sigmoid_of_bias(vocab, head):
    p = params_for(vocab, head)
    for k, t in p.tensors.items():
        t.data = np.zeros_like(t.data)
    p.tensors["out_b"].data = np.array(0.7)
    for seed in range(3):
        pred = predict(p, [narrative(vocab, 5 + seed, seed)])[0]
        assert pred.probability == pytest.approx(1 / (1 + math.exp(-0.7)), abs=1e-15)


@pytest.mark.parametrize("head", ["max", "attn"])
def test_padding_region_is_invisible(vocab, head):
    p = params_for(vocab, head)
    x = narrative(vocab, 9, seed=3)
    base = predict(p, [x])[0]
    rng = np.random.default_rng(0)
    for _ in range(5):
        ids = x.ids.copy()
        ids[x.n_valid:] = rng.integers(0, len(vocab), ids.size - x.n_valid)
        other = predict(p, [EncodedNarrative(ids, x.n_real_tokens)])[0]
        assert other.logit == base.logit
        if head == "attn":
            np.testing.assert_array_equal(other.trace.alpha, base.trace.alpha)


def test_batch_composition_does_not_change_output(vocab):
    p = params_for(vocab, "attn")
    xs = [narrative(vocab, n, seed=n) for n in (3, 30, 11)]
    alone = [predict(p, [x])[0].logit for x in xs]
    together = [q.logit for q in predict(p, xs)]
    np.testing.assert_allclose(together, alone, rtol=0, atol=1e-12)


def test_zero_query_gives_uniform_alpha(vocab):
    p = params_for(vocab, "attn")
    p.tensors["query"].data = np.zeros(5)
    x = narrative(vocab, 13, seed=1)
    tr = predict(p, [x])[0].trace
    assert tr.alpha.shape == (3 * MAX_LEN,)
    valid = np.concatenate([np.arange(MAX_LEN) < 13] * 3)
    np.testing.assert_allclose(tr.alpha[valid], 1 / 39, rtol=0, atol=1e-15)
    assert not tr.alpha[~valid].any()


def test_dominant_row_takes_the_attention(vocab):
    p = params_for(vocab, "attn", n_filters=4, dim=4)
    t = p.tensors
    for w in WIDTHS:
        t[f"conv{w}_w"].data[:] = 0.0
        t[f"conv{w}_b"].data[:] = 0.0
    hot = vocab.id("w5")
    t["embedding"].data[:] = 0.0
    t["embedding"].data[hot] = [1.0, 0, 0, 0]
    t["conv1_w"].data[0, 0, 0] = 40.0  # only the width-1 filter fires on w5
    t["query"].data = np.array([1.0, 0, 0, 0])
    toks = ["w1"] * 10
    toks[6] = "w5"
    tr = predict(p, [encode(toks, vocab)])[0].trace
    assert tr.alpha.argmax() == 6 and tr.alpha[6] > 0.9


def test_alpha_normalised(vocab):
    p = params_for(vocab, "attn")
    for n in (1, 2, 3, 50):
        a = predict(p, [narrative(vocab, n, seed=n)])[0].trace.alpha
        assert abs(a.sum() - 1) <= 1e-6 and a.min() >= 0


def test_span_map(vocab):
    p = params_for(vocab, "attn")
    tr = predict(p, [narrative(vocab, 4, max_len=10)])[0].trace
    assert tr.span_map.shape == (30, 2)
    assert tr.span(0) == (1, 0) and tr.span(10) == (2, 0) and tr.span(29) == (3, 9)


def test_empty_narrative_is_refused(vocab):
    p = params_for(vocab, "max")
    x = EncodedNarrative(np.full(10, PAD_ID), 0)
    with pytest.raises(ModelInputError):
        forward_max(x, p)


def test_head_mismatch(vocab):
    with pytest.raises(ModelInputError):
        forward_attn(narrative(vocab, 4), params_for(vocab, "max"))


def test_init_seeded(vocab):
    emb = embedding(vocab)
    a = init_params(vocab, emb, "attn", seed=1).arrays()
    b = init_params(vocab, emb, "attn", seed=1).arrays()
    c = init_params(vocab, emb, "attn", seed=2).arrays()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["conv2_w"], c["conv2_w"])
    assert not a["embedding"][PAD_ID].any()


def test_init_scale_follows_fan_in(vocab):
    # with n_filters == dim, fan_out == fan_in, so Glorot variance is exactly 1 / fan_in
    rms = {}
    for dim in (8, 32):
        vals = {w: [] for w in WIDTHS}
        for seed in range(100):
            p = init_params(vocab, embedding(vocab, dim), "max", seed=seed, n_filters=dim)
            for w in WIDTHS:
                vals[w].append(np.sqrt(np.mean(p.tensors[f"conv{w}_w"].data ** 2)))
        for w in WIDTHS:
            fan_in = w * dim
            rms[(dim, w)] = np.mean(vals[w]) * np.sqrt(fan_in)
    for v in rms.values():
        assert v == pytest.approx(1.0, rel=0.02)


def test_init_dim_mismatch(vocab):
    other = build_vocab([["a", "b"]], min_doc_freq=1)
    with pytest.raises(ModelInputError):
        init_params(vocab, embedding(other), "max")
    with pytest.raises(ModelInputError):
        init_params(vocab, embedding(vocab), "mean")


@pytest.mark.parametrize("dtype", ["float64", "float32"])
def test_checkpoint_round_trip(tmp_path, vocab, dtype):
    p = init_params(vocab, embedding(vocab), "attn", seed=3, dtype=dtype)
    save_checkpoint(p, tmp_path / "c.ckpt", extra={"fold_index": 2})
    back, extra = load_checkpoint(tmp_path / "c.ckpt")
    assert extra == {"fold_index": 2} and back.dtype == dtype and back.head == "attn"
    for k, t in p.tensors.items():
        assert back.tensors[k].data.tobytes() == t.data.tobytes()


def test_checkpoint_truncation(tmp_path, vocab):
    save_checkpoint(params_for(vocab, "max"), tmp_path / "c.ckpt")
    raw = (tmp_path / "c.ckpt").read_bytes()
    (tmp_path / "c.ckpt").write_bytes(raw[:-16])
    with pytest.raises(ModelInputError):
        load_checkpoint(tmp_path / "c.ckpt")


def test_float32_tracks_float64(vocab):
    p64 = init_params(vocab, embedding(vocab), "attn", seed=4)
    p32 = init_params(vocab, embedding(vocab), "attn", seed=4, dtype="float32")
    xs = [narrative(vocab, n, seed=n) for n in (5, 40)]
    a = [q.probability for q in predict(p64, xs)]
    b = [q.probability for q in predict(p32, xs)]
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_train_mode_uses_dropout(vocab):
    p = params_for(vocab, "max")
    x = narrative(vocab, 30, seed=2)
    outs = {forward_max(x, p, "train", np.random.default_rng(s)).logit for s in range(4)}
    assert len(outs) > 1
    assert forward_max(x, p, "eval").logit == forward_max(x, p, "eval").logit


def test_gradient_flows_everywhere(vocab):
    p = params_for(vocab, "attn")
    ids, n_valid = batch_arrays([narrative(vocab, 8, seed=s) for s in range(3)])
    loss = batch_loss(p, ids, n_valid, np.array([1.0, 0.0, 1.0]), training=False)
    loss.backward()
    for k, t in p.trainable().items():
        assert t.grad is not None and np.isfinite(t.grad).all(), k
    assert not p.tensors["embedding"].grad[PAD_ID].any()
    assert isinstance(loss, nk.Tensor)
