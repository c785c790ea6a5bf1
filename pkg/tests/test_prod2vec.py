import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prodembed.numerics import grad_check
from prodembed.prod2vec import (
    Prod2vecConfig,
    _centers,
    cbow_batch,
    draw_negatives,
    export_embeddings,
    knn_predict,
    knn_rank,
    load_model,
    noise_distribution,
    read_embeddings,
    save_model,
    session_vector,
    train_cbow,
)
from prodembed.session_data import N_SPECIAL, build_vocab


def _chain_corpus(n=300, vocab=40, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        start = int(rng.integers(vocab))
        out.append([f"p{(start + j) % vocab}" for j in range(int(rng.integers(3, 9)))])
    return out


def test_noise_distribution_power_law():
    counts = np.array([0, 0, 0, 1, 16, 81])
    noise = noise_distribution(counts, 0.75)
    assert noise[:3].sum() == 0
    np.testing.assert_allclose(noise[3:] / noise[3], [1, 8, 27])
    assert noise.sum() == pytest.approx(1.0)


def test_negatives_never_specials():
    noise = noise_distribution(np.array([0, 0, 0, 5, 1, 9]), 0.75)
    negs = draw_negatives(noise, (10_000,), np.random.default_rng(0))
    assert negs.min() >= N_SPECIAL
    freq = np.bincount(negs, minlength=6)[3:] / len(negs)
    np.testing.assert_allclose(freq, noise[3:], atol=0.02)


def test_cbow_gradient_dim4():
    rng = np.random.default_rng(0)
    V, D = 9, 4
    ctx = np.array([[3, 4, 5, 0], [6, 7, 0, 0]])
    mask = np.array([[1, 1, 1, 0], [1, 1, 0, 0]], dtype=bool)
    targets = np.array([[8, 3, 6], [5, 4, 8]])
    labels = np.array([[1, 0, 0], [1, 0, 0]], dtype=float)
    weights = np.ones_like(labels)
    params = {"w_in": rng.normal(size=(V, D)), "w_out": rng.normal(size=(V, D))}

    def fn(p):
        loss, g_in, g_out = cbow_batch(p["w_in"], p["w_out"], ctx, mask, targets, labels, weights)
        gi = np.zeros_like(p["w_in"])
        go = np.zeros_like(p["w_out"])
        np.add.at(gi, ctx.ravel(), g_in.reshape(-1, D))
        np.add.at(go, targets.ravel(), g_out.reshape(-1, D))
        return loss, {"w_in": gi, "w_out": go}

    assert grad_check(fn, params, n_samples=None) < 1e-6


def test_cbow_padding_slots_get_no_gradient():
    rng = np.random.default_rng(1)
    w_in, w_out = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    _, g_in, _ = cbow_batch(w_in, w_out, np.array([[3, 4, 0]]), np.array([[1, 1, 0]], bool),
                            np.array([[5, 3]]), np.array([[1.0, 0.0]]))
    assert np.all(g_in[0, 2] == 0)


def test_centers_respect_window():
    rows = [np.arange(3, 13)]
    centers, ctx, mask = _centers(rows, 2, np.random.default_rng(0), shrink=False)
    assert len(centers) == 10
    # the first item sees two right neighbours only
    assert sorted(ctx[0][mask[0]].tolist()) == [4, 5]
    assert sorted(ctx[5][mask[5]].tolist()) == [6, 7, 9, 10]


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(2, 12), min_size=1, max_size=8), st.integers(1, 6), st.booleans())
def test_centers_context_within_session(lengths, window, shrink):
    rng = np.random.default_rng(0)
    base, rows = 3, []
    for n in lengths:
        rows.append(np.arange(base, base + n))
        base += n
    centers, ctx, mask = _centers(rows, window, rng, shrink)
    owner = {int(t): i for i, r in enumerate(rows) for t in r}
    for c, cx, m in zip(centers, ctx, mask):
        live = cx[m]
        assert len(live) >= 1 and c not in live
        assert all(owner[int(t)] == owner[int(c)] and abs(int(t) - int(c)) <= window for t in live)


def test_training_reduces_loss_and_is_deterministic():
    sessions = _chain_corpus()
    cfg = Prod2vecConfig(dimensions=8, window=2, iterations=5, seed=1)
    a, ha = train_cbow(sessions, cfg)
    b, hb = train_cbow(sessions, cfg)
    assert ha["loss"][-1] < ha["loss"][0]
    assert ha == hb
    np.testing.assert_array_equal(a.w_in, b.w_in)


def test_neighbours_learn_chain_structure():
    sessions = _chain_corpus(600, 30)
    model, _ = train_cbow(sessions, Prod2vecConfig(dimensions=16, window=1, iterations=15, seed=0))
    # with window 1, p_i and p_{i+-2} share the context item p_{i+-1}
    hits = 0
    for i in range(30):
        near = knn_predict(model, model.vector(f"p{i}"), 5)
        hits += f"p{(i + 2) % 30}" in near or f"p{(i - 2) % 30}" in near
    assert hits >= 20


def test_knn_scale_invariant():
    sessions = _chain_corpus()
    model, _ = train_cbow(sessions, Prod2vecConfig(dimensions=8, iterations=2))
    q = session_vector(model, ["p1", "p2", "p3"])
    for c in (1e-3, 0.5, 7.0, 1e4):
        assert knn_predict(model, c * q, 10) == knn_predict(model, q, 10)


def test_knn_contract():
    model, _ = train_cbow(_chain_corpus(), Prod2vecConfig(dimensions=8, iterations=1))
    n = model.vocab.n_products
    top = knn_predict(model, model.vector("p3"), n)
    assert sorted(top) == sorted(model.vocab.itos[N_SPECIAL:])
    with pytest.raises(ValueError):
        knn_predict(model, model.vector("p3"), 0)
    with pytest.raises(ValueError):
        knn_rank(model, np.zeros(8), 3)


def test_session_vector_is_mean():
    model, _ = train_cbow(_chain_corpus(), Prod2vecConfig(dimensions=8, iterations=1))
    v = session_vector(model, ["p1", "p5"])
    np.testing.assert_allclose(v, (model.vector("p1") + model.vector("p5")) / 2)
    np.testing.assert_allclose(session_vector(model, ["p2"] * 4), model.vector("p2"))
    with pytest.raises(ValueError):
        session_vector(model, [])
    with pytest.raises(KeyError):
        session_vector(model, ["nope"])


def test_export_and_reload(tmp_path):
    model, _ = train_cbow(_chain_corpus(), Prod2vecConfig(dimensions=8, iterations=1))
    export_embeddings(model, tmp_path / "emb.txt")
    ids, vecs = read_embeddings(tmp_path / "emb.txt")
    assert ids == model.vocab.itos[N_SPECIAL:]
    np.testing.assert_allclose(vecs, model.w_in[N_SPECIAL:], rtol=1e-6)
    save_model(model, tmp_path / "m")
    loaded = load_model(tmp_path / "m", model.vocab)
    np.testing.assert_array_equal(loaded.w_in, model.w_in)
    with pytest.raises(ValueError):
        load_model(tmp_path / "m", build_vocab([["x", "y"]]))


def test_requires_two_products():
    with pytest.raises(ValueError):
        train_cbow([["a", "a", "a"]], Prod2vecConfig(iterations=1))
