import numpy as np
import pytest

from prodembed.eval_intent import (
    IntentConfig,
    IntentDataset,
    MlpClassifier,
    build_intent_dataset,
    check_strategy,
    evaluate_strategy,
    featurize,
    featurize_sessions,
    fine_tune,
    init_head,
    init_lstm,
    lstm_cell,
    shuffle_labels,
    train_intent_classifier,
    train_intent_lstm,
)
from prodembed.numerics import GradTape, grad_check, ops
from prodembed.prod2vec import Prod2vecConfig, train_cbow
from prodembed.prodbert import ProdBertConfig, encode_sessions, init_model, pooled_layers, train_mlm
from prodembed.session_data import Session, build_vocab
from prodembed.synth import GenParams, generate_catalog, generate_sessions


@pytest.fixture(scope="module")
def corpus():
    cat = generate_catalog(100, 10, np.random.default_rng(0))
    params = GenParams(n_sessions=3000, trigger_type="t0", trigger_prob=1.0, base_rate=0.0, seed=2)
    return generate_sessions(cat, params).sessions


@pytest.fixture(scope="module")
def dataset(corpus):
    return build_intent_dataset(corpus, 200, seed=0)


@pytest.fixture(scope="module")
def backbone(corpus):
    cfg = ProdBertConfig(layers=2, dim=16, heads=2, epochs=1, batch_size=64, seed=0)
    model = init_model(cfg, build_vocab(corpus))
    model, _ = train_mlm(model, corpus, cfg)
    return model


def _balanced(n, seed=0):
    rng = np.random.default_rng(seed)
    return [Session([f"p{i}" for i in rng.integers(0, 20, size=4)], bool(k % 2), str(k)) for k in range(n)]


# -- dataset -------------------------------------------------------------------


def test_dataset_sizes_and_balance():
    ds = build_intent_dataset(_balanced(5000), 2000, seed=1)
    assert (len(ds.train), len(ds.validation), len(ds.test)) == (3200, 400, 400)
    for name in ("train", "validation", "test"):
        assert ds.labels(ds.split(name)).mean() == 0.5
    ids = [{s.session_id for s in ds.split(n)} for n in ("train", "validation", "test")]
    assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
    again = build_intent_dataset(_balanced(5000), 2000, seed=1)
    assert [s.session_id for s in again.test] == [s.session_id for s in ds.test]


def test_dataset_insufficient_reports_counts():
    with pytest.raises(ValueError, match="50 positive and 50 negative"):
        build_intent_dataset(_balanced(100), 60)


def test_shuffle_labels_keeps_items_and_counts(dataset):
    shuf = shuffle_labels(dataset, seed=3)
    for name in ("train", "validation", "test"):
        a, b = dataset.split(name), shuf.split(name)
        assert [s.items for s in a] == [s.items for s in b]
        assert sorted(dataset.labels(a)) == sorted(shuf.labels(b))
    assert (shuf.labels(shuf.train) != dataset.labels(dataset.train)).any()


# -- MLP head ------------------------------------------------------------------


def _split(X, y, n_train, n_val):
    return ({"train": X[:n_train], "validation": X[n_train:n_train + n_val]},
            {"train": y[:n_train], "validation": y[n_train:n_train + n_val]},
            X[n_train + n_val:], y[n_train + n_val:])


def test_separable_features():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(2000, 10))
    w = rng.normal(size=10)
    margin = X @ w
    keep = np.abs(margin) > 0.3
    X, y = X[keep], (margin[keep] > 0).astype(int)
    feats, labels, Xte, yte = _split(X, y, 1200, 200)
    clf, hist = train_intent_classifier(feats, labels, IntentConfig(max_epochs=60))
    assert np.mean(clf.predict(Xte) == yte) > 0.95
    proba = clf.predict_proba(Xte)
    assert np.all((proba > 0) & (proba < 1))
    assert len(hist["val_acc"]) == clf.metadata["epochs_run"]


def test_shuffled_labels_chance():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(4000, 10))
    y = rng.permutation(np.repeat([0, 1], 2000))
    feats, labels, Xte, yte = _split(X, y, 1600, 400)
    clf, hist = train_intent_classifier(feats, labels, IntentConfig(max_epochs=60))
    assert abs(np.mean(clf.predict(Xte) == yte) - 0.5) <= 0.05
    # stops early and keeps the best validation epoch
    assert clf.metadata["epochs_run"] < 60
    assert clf.metadata["best_epoch"] == int(np.argmax(hist["val_acc"])) + 1


def test_single_class_rejected():
    X = np.zeros((10, 3))
    with pytest.raises(ValueError, match="both classes"):
        train_intent_classifier({"train": X, "validation": X}, {"train": np.ones(10), "validation": np.ones(10)})


def _wal_head(L=3, D=5, seed=0):
    rng = np.random.default_rng(seed)
    cfg = IntentConfig(hidden=6, activation="tanh")
    params = init_head(D, cfg, rng, n_layers=L)
    params["wal"] = rng.normal(size=L)
    return MlpClassifier(cfg, params, np.zeros((L, D)), np.ones((L, D)), L)


def test_wal_gradient():
    clf = _wal_head()
    rng = np.random.default_rng(1)
    X = rng.normal(size=(7, 3, 5))
    y = rng.integers(0, 2, size=7)

    def fn(p):
        tape = GradTape()
        bound = {k: tape.watch(v) for k, v in p.items()}
        loss = ops.bce_with_logits(clf.logits(X, bound), y)
        grads = tape.gradient(loss, list(bound.values()))
        return float(loss.value), dict(zip(bound, grads))

    assert grad_check(fn, clf.params, n_samples=None) < 1e-3


def test_wal_weights_convex():
    clf = _wal_head()
    w = clf.layer_weights
    assert w.sum() == pytest.approx(1.0) and np.all(w > 0)


def test_wal_one_hot_equals_enc(backbone, dataset):
    sessions = dataset.test[:20]
    stacked = pooled_layers(backbone, sessions)
    L, D = stacked.shape[1:]
    for i in range(L):
        wal = _wal_head(L, D)
        wal.params["wal"] = np.where(np.arange(L) == i, 0.0, -1e4)
        single = MlpClassifier(wal.config, {k: v for k, v in wal.params.items() if k != "wal"},
                               np.zeros(D), np.ones(D))
        np.testing.assert_allclose(wal.predict_proba(stacked),
                                   single.predict_proba(encode_sessions(backbone, sessions, f"enc_{i}")),
                                   rtol=1e-6)


def test_feature_shapes():
    vocab = build_vocab([[f"p{i}" for i in range(30)]])
    model = init_model(ProdBertConfig(layers=4, dim=64), vocab)
    s = ["p1", "p2", "p3"]
    assert featurize(model, s, "concat").shape == (256,)
    assert featurize_sessions(model, [s, s], "wal").shape == (2, 4, 64)
    assert not np.allclose(featurize(model, s, "enc_0"), featurize(model, s, "enc_3"))


def test_strategy_validation():
    assert check_strategy("enc_3", 4) == "enc_3"
    for bad in ("enc_4", "enc_x", "mean", ""):
        with pytest.raises(ValueError):
            check_strategy(bad, 4)
    vocab = build_vocab([["a", "b", "c"]])
    with pytest.raises(ValueError):
        featurize(init_model(ProdBertConfig(layers=2, dim=8, heads=2), vocab), ["a", "b"], "fine_tune")


def test_evaluate_strategy_report(backbone, dataset):
    rep = evaluate_strategy(backbone, dataset, "wal", IntentConfig(max_epochs=15))
    assert 0.0 <= rep.accuracy <= 1.0 and rep.strategy == "wal"
    assert sum(rep.extra["layer_weights"]) == pytest.approx(1.0)
    assert rep.backbone_config_hash == backbone.metadata["config_hash"]
    assert '"overfit"' in rep.to_json() and "strategy" in rep.to_text()


# -- fine-tuning -----------------------------------------------------------------


def test_fine_tune_zero_epochs_is_fresh_head(backbone, dataset):
    cfg = IntentConfig(fine_tune_epochs=0)
    clf = fine_tune(backbone, dataset, cfg)
    last = f"enc_{backbone.n_layers - 1}"
    Xtr = featurize_sessions(backbone, dataset.train, last)
    head = MlpClassifier(cfg, init_head(Xtr.shape[1], cfg, np.random.default_rng([cfg.seed, 6])),
                         Xtr.mean(axis=0), Xtr.std(axis=0))
    np.testing.assert_array_equal(clf.predict_proba(dataset.test),
                                  head.predict_proba(featurize_sessions(backbone, dataset.test, last)))


def test_fine_tune_frozen_backbone(backbone, dataset):
    cfg = IntentConfig(backbone_lr=0.0, fine_tune_epochs=8)
    clf = fine_tune(backbone, dataset, cfg)
    for k, v in backbone.params.items():
        assert np.array_equal(clf.backbone.params[k], v)
    frozen = evaluate_strategy(backbone, dataset, f"enc_{backbone.n_layers - 1}", IntentConfig(max_epochs=8))
    assert abs(clf.report.accuracy - frozen.accuracy) <= 0.01


def test_fine_tune_updates_copy_only(backbone, dataset):
    before = {k: v.copy() for k, v in backbone.params.items()}
    clf = fine_tune(backbone, dataset, IntentConfig(backbone_lr=1e-3, fine_tune_epochs=2))
    assert all(np.array_equal(backbone.params[k], before[k]) for k in before)
    assert any(not np.array_equal(clf.backbone.params[k], before[k]) for k in before)


def test_fine_tune_flags_overfitting(backbone, corpus):
    tiny = shuffle_labels(build_intent_dataset(corpus, 100, seed=5), seed=5)
    clf = fine_tune(backbone, tiny, IntentConfig(backbone_lr=1e-3, head_lr=1e-2, fine_tune_epochs=30, patience=30))
    gap = clf.history["train_acc"][-1] - clf.history["val_acc"][-1]
    assert gap > 0.10 and clf.report.overfit


def test_fine_tune_requires_pretrained(dataset):
    fresh = init_model(ProdBertConfig(layers=2, dim=16, heads=2), build_vocab([s.items for s in dataset.train]))
    with pytest.raises(ValueError, match="pre-train"):
        fine_tune(fresh, dataset)


# -- LSTM baseline -----------------------------------------------------------------


def test_lstm_cell_gradient_width4():
    rng = np.random.default_rng(0)
    params = init_lstm(3, IntentConfig(hidden=4), rng)
    params = {k: v + rng.normal(scale=0.3, size=np.shape(v)) for k, v in params.items() if k in ("wx", "wh", "b")}
    xs = rng.normal(size=(2, 5, 3))
    r = rng.normal(size=(5, 4))

    def fn(p):
        tape = GradTape()
        bound = {k: tape.watch(v) for k, v in p.items()}
        h = c = np.zeros((5, 4))
        for x in xs:
            h, c = lstm_cell(x, h, c, bound)
        loss = ops.sum_(h * r) + ops.sum_(c * c)
        grads = tape.gradient(loss, list(bound.values()))
        return float(loss.value), dict(zip(bound, grads))

    assert grad_check(fn, params, n_samples=None) < 1e-3


def test_lstm_constant_input_is_chance():
    sessions = [Session(["a", "a", "a"], bool(k % 2), str(k)) for k in range(400)]
    ds = build_intent_dataset(sessions, 200, seed=0)
    p2v, _ = train_cbow([["a", "b", "c"]] * 20, Prod2vecConfig(dimensions=8, iterations=1))
    _, rep = train_intent_lstm(p2v, ds, IntentConfig(hidden=8, max_epochs=5))
    assert abs(rep.accuracy - 0.5) <= 0.05


def test_lstm_learns_trigger(corpus, dataset):
    p2v, _ = train_cbow([s.items for s in corpus], Prod2vecConfig(dimensions=16, window=3, iterations=5))
    clf, rep = train_intent_lstm(p2v, dataset, IntentConfig(hidden=16, max_epochs=40, learning_rate=1e-2))
    assert rep.accuracy > 0.9
    proba = clf.predict_proba(dataset.test)
    assert np.all((proba > 0) & (proba < 1))


def test_lstm_unknown_items_use_zero_row(corpus):
    p2v, _ = train_cbow([s.items for s in corpus[:200]], Prod2vecConfig(dimensions=8, iterations=1))
    ds = build_intent_dataset(_balanced(60), 30)
    clf, _ = train_intent_lstm(p2v, ds, IntentConfig(hidden=4, max_epochs=1))
    rows = clf.encode([["never-seen", "other"]])
    assert np.all(clf.embeddings[rows[0]] == 0)
