import numpy as np
import pytest
from sklearn.base import clone

from prodembed.estimators import ExactTSNE, IntentMLPClassifier, Prod2VecEncoder, ProdBertEncoder
from prodembed.session_data import Session


def _sessions(n=200, vocab=20, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        start = int(rng.integers(vocab))
        out.append([f"p{(start + j) % vocab}" for j in range(int(rng.integers(3, 7)))])
    return out


def test_params_roundtrip_and_clone():
    enc = ProdBertEncoder(layers=2, dim=16, heads=2)
    assert enc.get_params()["layers"] == 2
    twin = clone(enc).set_params(mask_prob=0.15)
    assert twin.mask_prob == 0.15 and enc.mask_prob == 0.25
    assert clone(Prod2VecEncoder(dimensions=8)).dimensions == 8


def test_prodbert_encoder():
    X = _sessions()
    enc = ProdBertEncoder(layers=2, dim=16, heads=2, epochs=4).fit(X)
    Z = enc.transform(X[:5])
    assert Z.shape == (5, 16) and np.all(np.isfinite(Z))
    assert len(enc.predict_masked(X[0], 1, k=3)) == 3
    assert enc.history_["train_loss"]
    with pytest.raises(ValueError):
        enc.predict_masked(X[0], 1, k=0)


def test_prod2vec_encoder():
    X = _sessions()
    enc = Prod2VecEncoder(dimensions=8, window=2, iterations=2).fit(X)
    assert enc.transform([Session(["p1", "p2", "p3"])]).shape == (1, 8)
    assert len(enc.kneighbors([["p1", "p2"]], k=4)[0]) == 4


def test_not_fitted():
    with pytest.raises(RuntimeError, match="not fitted"):
        ProdBertEncoder().transform([["a", "b"]])
    with pytest.raises(RuntimeError, match="not fitted"):
        IntentMLPClassifier().predict(np.zeros((2, 3)))


def test_session_validation():
    with pytest.raises(TypeError):
        Prod2VecEncoder().fit("p1 p2 p3")
    with pytest.raises(TypeError):
        Prod2VecEncoder().fit(["p1 p2 p3"])
    with pytest.raises(ValueError):
        Prod2VecEncoder().fit([])
    with pytest.raises(ValueError):
        Prod2VecEncoder().fit([["p1"]])


def test_intent_mlp_classifier():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(600, 4))
    y = (X[:, 0] + X[:, 1] > 0).astype(int)
    clf = IntentMLPClassifier(max_epochs=40).fit(X[:500], y[:500])
    assert clf.score(X[500:], y[500:]) > 0.9
    proba = clf.predict_proba(X[500:])
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    with pytest.raises(ValueError):
        IntentMLPClassifier().fit(X, np.full(600, 2))
    with pytest.raises(ValueError):
        IntentMLPClassifier(validation_fraction=1.5).fit(X, y)


def test_exact_tsne():
    X = np.random.default_rng(0).normal(size=(60, 5))
    ts = ExactTSNE(perplexity=10, iterations=300)
    Y = ts.fit_transform(X)
    assert Y.shape == (60, 2)
    assert ts.kl_divergence_ == ts.kl_trajectory_[300]
