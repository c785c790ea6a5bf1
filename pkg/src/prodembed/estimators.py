"""scikit-learn style wrappers around the training and evaluation functions.

The wrappers hold hyperparameters as constructor arguments (so ``get_params``,
``set_params`` and ``clone`` work) and keep fitted state in trailing-underscore
attributes.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from . import eval_intent, prod2vec, prodbert, viz
from ._validation import check_binary_labels, check_is_fitted, check_positive_int, check_sessions
from .session_data import build_vocab, duplicate, filter_by_length


class ProdBertEncoder(TransformerMixin, BaseEstimator):
    """Masked-session encoder; ``transform`` returns pooled session vectors."""

    def __init__(self, layers=4, dim=64, heads=4, mask_prob=0.25, duplicated=False, epochs=10,
                 batch_size=64, learning_rate=1e-3, dropout=0.1, selector="enc_0", seed=0):
        self.layers = layers
        self.dim = dim
        self.heads = heads
        self.mask_prob = mask_prob
        self.duplicated = duplicated
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.dropout = dropout
        self.selector = selector
        self.seed = seed

    def _config(self) -> prodbert.ProdBertConfig:
        return prodbert.ProdBertConfig(
            epochs=self.epochs, layers=self.layers, dim=self.dim, heads=self.heads,
            mask_prob=self.mask_prob, duplicated=self.duplicated, batch_size=self.batch_size,
            learning_rate=self.learning_rate, dropout=self.dropout, seed=self.seed,
        )

    def fit(self, X, y=None, validation=None):
        sessions = filter_by_length(check_sessions(X))
        if not sessions:
            raise ValueError("no sessions of length 3..20 to train on")
        cfg = self._config()
        self.vocab_ = build_vocab(sessions)
        train = duplicate(sessions, 5) if cfg.duplicated else sessions
        model = prodbert.init_model(cfg, self.vocab_)
        self.model_, self.history_ = prodbert.train_mlm(model, train, cfg, validation=validation)
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return prodbert.encode_sessions(self.model_, check_sessions(X), self.selector)

    def predict_masked(self, session, position: int, k: int = 10):
        check_is_fitted(self, "model_")
        return prodbert.predict_masked(self.model_, list(session), position, check_positive_int(k, "k"))


class Prod2VecEncoder(TransformerMixin, BaseEstimator):
    """CBOW product embeddings; ``transform`` averages item vectors per session."""

    def __init__(self, dimensions=48, window=15, iterations=30, negative=5, ns_exponent=0.75, seed=0):
        self.dimensions = dimensions
        self.window = window
        self.iterations = iterations
        self.negative = negative
        self.ns_exponent = ns_exponent
        self.seed = seed

    def fit(self, X, y=None):
        sessions = check_sessions(X, min_len=2)
        cfg = prod2vec.Prod2vecConfig(window=self.window, iterations=self.iterations,
                                      ns_exponent=self.ns_exponent, dimensions=self.dimensions,
                                      negative=self.negative, seed=self.seed)
        self.model_, self.history_ = prod2vec.train_cbow(sessions, cfg)
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return np.array([prod2vec.session_vector(self.model_, s) for s in check_sessions(X)])

    def kneighbors(self, X, k: int = 10) -> list[list[str]]:
        return [prod2vec.knn_predict(self.model_, v, k) for v in self.transform(X)]


class IntentMLPClassifier(ClassifierMixin, BaseEstimator):
    """MLP head on precomputed features, early-stopped on a held-out fraction."""

    def __init__(self, hidden=64, activation="relu", learning_rate=1e-3, batch_size=64,
                 max_epochs=200, patience=10, validation_fraction=0.1, seed=0):
        self.hidden = hidden
        self.activation = activation
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.seed = seed

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = check_binary_labels(y, len(X))
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")
        rng = np.random.default_rng([self.seed, 11])
        perm = rng.permutation(len(X))
        n_val = max(1, int(round(self.validation_fraction * len(X))))
        val, tr = perm[:n_val], perm[n_val:]
        cfg = eval_intent.IntentConfig(hidden=self.hidden, activation=self.activation,
                                       learning_rate=self.learning_rate, batch_size=self.batch_size,
                                       max_epochs=self.max_epochs, patience=self.patience, seed=self.seed)
        self.classifier_, self.history_ = eval_intent.train_intent_classifier(
            {"train": X[tr], "validation": X[val]}, {"train": y[tr], "validation": y[val]}, cfg)
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "classifier_")
        p = self.classifier_.predict_proba(np.asarray(X, dtype=np.float64))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)


class ExactTSNE(BaseEstimator):
    """Exact t-SNE to two dimensions."""

    def __init__(self, perplexity=30.0, iterations=1000, learning_rate=200.0, seed=0):
        self.perplexity = perplexity
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.seed = seed

    def fit(self, X, y=None):
        res = viz.tsne(X, self.perplexity, self.iterations, np.random.default_rng([self.seed, 8]),
                       learning_rate=self.learning_rate)
        self.embedding_ = res.coords
        self.kl_divergence_ = res.final_kl
        self.kl_trajectory_ = res.kl
        return self

    def fit_transform(self, X, y=None):
        return self.fit(X).embedding_


__all__ = ["ExactTSNE", "IntentMLPClassifier", "Prod2VecEncoder", "ProdBertEncoder"]
