"""Intent (add-to-cart) prediction on top of pre-trained session encoders.

Four ways of adapting a ProdBERT model are supported: pooled features from a
single layer (``enc_i``), all layers concatenated (``concat``), a learned
convex combination of layers (``wal``), and end-to-end ``fine_tune``. The
baseline runs an LSTM over frozen prod2vec item vectors.
"""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from ._io import config_hash
from .numerics import AdamState, GradTape, adam_step, ops
from .session_data import UNK, Session, pad_ids

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class IntentConfig:
    hidden: int = 64
    activation: str = "relu"
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 10
    # fine-tuning
    backbone_lr: float = 1e-5
    head_lr: float = 1e-3
    fine_tune_epochs: int = 30
    overfit_gap: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"activation must be relu or tanh, got {self.activation!r}")
        if self.hidden < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("hidden, batch_size and patience must be positive")
        if self.max_epochs < 0 or self.fine_tune_epochs < 0:
            raise ValueError("epoch counts must be >= 0")


# -- dataset ----------------------------------------------------------------


@dataclass
class IntentDataset:
    train: list
    validation: list
    test: list
    seed: int = 0

    def split(self, name: str) -> list:
        return {"train": self.train, "validation": self.validation, "test": self.test}[name]

    @staticmethod
    def labels(sessions: Sequence[Session]) -> np.ndarray:
        return np.array([int(s.add_to_cart) for s in sessions], dtype=np.int64)

    def __len__(self):
        return len(self.train) + len(self.validation) + len(self.test)


def build_intent_dataset(corpus: Sequence[Session], n_per_class: int, seed: int = 0,
                         ratios=(0.8, 0.1, 0.1)) -> IntentDataset:
    """Sample ``n_per_class`` sessions of each label and split them, stratified."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    pos = [s for s in corpus if s.add_to_cart is True]
    neg = [s for s in corpus if s.add_to_cart is False]
    if len(pos) < n_per_class or len(neg) < n_per_class:
        raise ValueError(
            f"need {n_per_class} sessions per class, corpus has {len(pos)} positive "
            f"and {len(neg)} negative labeled sessions"
        )
    rng = np.random.default_rng([seed, 4])
    n_train = int(round(ratios[0] * n_per_class))
    n_val = int(round(ratios[1] * n_per_class))
    parts = {"train": [], "validation": [], "test": []}
    for group in (neg, pos):
        pick = rng.choice(len(group), size=n_per_class, replace=False)
        chosen = [group[i] for i in pick]
        parts["train"] += chosen[:n_train]
        parts["validation"] += chosen[n_train : n_train + n_val]
        parts["test"] += chosen[n_train + n_val :]
    for name in parts:
        order = rng.permutation(len(parts[name]))
        parts[name] = [parts[name][i] for i in order]
    return IntentDataset(parts["train"], parts["validation"], parts["test"], seed)


def shuffle_labels(dataset: IntentDataset, seed: int = 0) -> IntentDataset:
    """Control dataset: labels permuted within each split, items untouched."""
    rng = np.random.default_rng([seed, 5])

    def shuf(sessions):
        labels = [s.add_to_cart for s in sessions]
        perm = rng.permutation(len(labels))
        return [Session(s.items, labels[j], s.session_id) for s, j in zip(sessions, perm)]

    return IntentDataset(shuf(dataset.train), shuf(dataset.validation), shuf(dataset.test), dataset.seed)


# -- features -----------------------------------------------------------------

STRATEGIES = ("enc_<i>", "concat", "wal", "fine_tune")


def check_strategy(strategy: str, n_layers: int) -> str:
    if strategy in ("concat", "wal", "fine_tune"):
        return strategy
    if strategy.startswith("enc_") and strategy[4:].isdigit():
        i = int(strategy[4:])
        if i >= n_layers:
            raise ValueError(f"{strategy} needs layer {i} but the model has {n_layers} layers")
        return strategy
    raise ValueError(f"unknown strategy {strategy!r}; expected one of {', '.join(STRATEGIES)}")


def featurize_sessions(model, sessions: Sequence, strategy: str) -> np.ndarray:
    """``[n, dim]`` features for ``enc_i``/``concat``; ``[n, layers, dim]`` for ``wal``."""
    from .prodbert import encode_sessions, pooled_layers

    check_strategy(strategy, model.n_layers)
    if strategy == "fine_tune":
        raise ValueError("fine_tune trains the encoder itself; use fine_tune() instead")
    if strategy == "wal":
        return pooled_layers(model, sessions)
    return encode_sessions(model, sessions, strategy)


def featurize(model, session, strategy: str) -> np.ndarray:
    return featurize_sessions(model, [session], strategy)[0]


# -- MLP head -----------------------------------------------------------------


@dataclass
class MlpClassifier:
    """One hidden layer MLP with a sigmoid output.

    ``n_layers`` is set for ``wal`` heads, whose inputs are per-layer pooled
    vectors mixed by ``softmax(params["wal"])`` before the MLP.
    """

    config: IntentConfig
    params: dict
    mean: np.ndarray
    scale: np.ndarray
    n_layers: int | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def layer_weights(self) -> np.ndarray | None:
        if self.n_layers is None:
            return None
        w = self.params["wal"] - self.params["wal"].max()
        e = np.exp(w)
        return e / e.sum()

    def logits(self, X, P: dict | None = None):
        """Tape-aware logits; ``P`` overrides ``self.params`` with watched vars."""
        P = self.params if P is None else P
        if isinstance(X, np.ndarray):
            X = (X - self.mean) / self.scale
        else:
            X = ops.mul(ops.sub(X, self.mean), 1.0 / self.scale)
        if self.n_layers is not None:
            w = ops.masked_softmax(P["wal"])
            X = ops.sum_(X * ops.reshape(w, (1, self.n_layers, 1)), axis=1)
        act = ops.relu if self.config.activation == "relu" else ops.tanh
        h = act(X @ P["w1"] + P["b1"])
        return h @ P["w2"] + P["b2"]

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        z = np.asarray(self.logits(np.asarray(X, dtype=np.float64)).value)
        return 1.0 / (1.0 + np.exp(-z))

    def predict(self, X: np.ndarray) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(np.int64)


def init_head(in_dim: int, config: IntentConfig, rng, n_layers: int | None = None) -> dict:
    h = config.hidden
    gain = 2.0 if config.activation == "relu" else 1.0
    params = {
        "w1": rng.normal(scale=math.sqrt(gain / in_dim), size=(in_dim, h)),
        "b1": np.zeros(h),
        "w2": rng.normal(scale=math.sqrt(1.0 / h), size=h),
        "b2": np.zeros(()),
    }
    if n_layers is not None:
        params["wal"] = np.zeros(n_layers)
    return params


def _feature_stats(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-8] = 1.0
    return mean, scale


def _check_labels(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y).astype(np.int64)
    if set(np.unique(y).tolist()) != {0, 1}:
        raise ValueError("intent training needs both classes present in the labels")
    return y


def accuracy(pred: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.asarray(pred) == np.asarray(y)))


@dataclass
class _FitResult:
    history: dict
    best_epoch: int
    epochs_run: int


def _fit(groups: list[tuple[dict, float]], batch_logits: Callable, n_train: int, y_train: np.ndarray,
         evaluate: Callable[[], tuple[float, float]], config: IntentConfig, max_epochs: int,
         rng) -> _FitResult:
    """Minibatch BCE training with early stopping on validation accuracy.

    ``groups`` pairs parameter dicts with their learning rates; the best
    validation snapshot of every group is restored in place at the end.
    Groups with a zero learning rate are frozen and get no gradients.
    """
    states = [AdamState.for_params(p, lr=lr) for p, lr in groups]
    history = {"train_acc": [], "val_acc": [], "loss": []}
    best = (-1.0, 0, [copy.deepcopy(p) for p, _ in groups])
    stale = 0
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        perm = rng.permutation(n_train)
        total = 0.0
        for start in range(0, n_train, config.batch_size):
            idx = perm[start : start + config.batch_size]
            tape = GradTape()
            bound = [{k: tape.watch(v) for k, v in p.items()} if lr > 0 else p for p, lr in groups]
            z = batch_logits(idx, bound)
            loss = ops.bce_with_logits(z, y_train[idx])
            live = [(params, b, state) for (params, lr), b, state in zip(groups, bound, states) if lr > 0]
            grads = iter(tape.gradient(loss, [v for _, b, _ in live for v in b.values()]))
            for params, b, state in live:
                adam_step(params, {k: next(grads) for k in b}, state)
            total += float(loss.value) * len(idx)
        train_acc, val_acc = evaluate()
        history["train_acc"].append(train_acc)
        history["val_acc"].append(val_acc)
        history["loss"].append(total / n_train)
        if val_acc > best[0]:
            best = (val_acc, epoch, [copy.deepcopy(p) for p, _ in groups])
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    if max_epochs > 0:
        for (params, _), snap in zip(groups, best[2]):
            for k in params:
                params[k][...] = snap[k]
    return _FitResult(history, best[1], epoch)


def train_intent_classifier(features: dict, labels: dict, config: IntentConfig | None = None):
    """Train an MLP head on precomputed features.

    ``features`` and ``labels`` map ``"train"`` and ``"validation"`` to arrays.
    Returns the classifier (restored to its best validation epoch) and the
    per-epoch accuracy history.
    """
    cfg = config if config is not None else IntentConfig()
    Xtr = np.asarray(features["train"], dtype=np.float64)
    Xva = np.asarray(features["validation"], dtype=np.float64)
    ytr = _check_labels(labels["train"])
    yva = np.asarray(labels["validation"]).astype(np.int64)
    rng = np.random.default_rng([cfg.seed, 6])
    n_layers = Xtr.shape[1] if Xtr.ndim == 3 else None
    mean, scale = _feature_stats(Xtr)
    clf = MlpClassifier(cfg, init_head(Xtr.shape[-1], cfg, rng, n_layers), mean, scale, n_layers)

    def evaluate():
        return accuracy(clf.predict(Xtr), ytr), accuracy(clf.predict(Xva), yva)

    fit = _fit([(clf.params, cfg.learning_rate)], lambda idx, b: clf.logits(Xtr[idx], b[0]),
               len(Xtr), ytr, evaluate, cfg, cfg.max_epochs, rng)
    clf.metadata.update(config_hash=config_hash(cfg), best_epoch=fit.best_epoch,
                        epochs_run=fit.epochs_run)
    return clf, fit.history


# -- reports --------------------------------------------------------------------


@dataclass
class IntentReport:
    strategy: str
    accuracy: float
    epochs: int
    best_epoch: int
    overfit: bool
    seed: int
    backbone_config_hash: str
    head_config_hash: str
    auc: float | None = None
    train_accuracy: float | None = None
    val_accuracy: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def summary_row(self) -> dict:
        return {
            "strategy": self.strategy,
            "accuracy": f"{self.accuracy:.4f}",
            "auc": "" if self.auc is None else f"{self.auc:.4f}",
            "epochs": self.epochs,
            "overfit": "yes" if self.overfit else "no",
            "seed": self.seed,
            "backbone": self.backbone_config_hash,
            "head": self.head_config_hash,
        }

    def to_text(self) -> str:
        from .eval_nep import format_table

        return format_table([self.summary_row()])


def _auc(y: np.ndarray, scores: np.ndarray) -> float | None:
    from sklearn.metrics import roc_auc_score

    if len(np.unique(y)) < 2:
        return None
    return float(roc_auc_score(y, scores))


def _overfit(history: dict, gap: float) -> bool:
    if not history["train_acc"]:
        return False
    return history["train_acc"][-1] - history["val_acc"][-1] > gap


def evaluate_strategy(model, dataset: IntentDataset, strategy: str,
                      config: IntentConfig | None = None) -> IntentReport:
    """Extract features with ``strategy``, train a head, score on the test split."""
    cfg = config if config is not None else IntentConfig()
    if check_strategy(strategy, model.n_layers) == "fine_tune":
        clf = fine_tune(model, dataset, cfg)
        return clf.report
    feats = {name: featurize_sessions(model, dataset.split(name), strategy)
             for name in ("train", "validation", "test")}
    labels = {name: dataset.labels(dataset.split(name)) for name in ("train", "validation", "test")}
    clf, hist = train_intent_classifier(feats, labels, cfg)
    proba = clf.predict_proba(feats["test"])
    return IntentReport(
        strategy=strategy,
        accuracy=accuracy(proba >= 0.5, labels["test"]),
        epochs=clf.metadata["epochs_run"],
        best_epoch=clf.metadata["best_epoch"],
        overfit=_overfit(hist, cfg.overfit_gap),
        seed=cfg.seed,
        backbone_config_hash=model.metadata.get("config_hash", ""),
        head_config_hash=clf.metadata["config_hash"],
        auc=_auc(labels["test"], proba),
        train_accuracy=hist["train_acc"][clf.metadata["best_epoch"] - 1] if hist["train_acc"] else None,
        val_accuracy=max(hist["val_acc"]) if hist["val_acc"] else None,
        extra={"layer_weights": clf.layer_weights.tolist()} if strategy == "wal" else {},
    )


# -- fine-tuning ------------------------------------------------------------------


@dataclass
class FineTunedClassifier:
    backbone: object
    head: MlpClassifier
    history: dict
    report: IntentReport | None = None

    def pooled(self, sessions: Sequence) -> np.ndarray:
        from .prodbert import encode_sessions

        return encode_sessions(self.backbone, sessions, f"enc_{self.backbone.n_layers - 1}")

    def predict_proba(self, sessions: Sequence) -> np.ndarray:
        return self.head.predict_proba(self.pooled(sessions))

    def predict(self, sessions: Sequence) -> np.ndarray:
        return (self.predict_proba(sessions) >= 0.5).astype(np.int64)


def _pooled_on_tape(model, rows: list, bound: dict):
    from .prodbert import forward

    ids, pad = pad_ids(rows)
    tape = getattr(next(iter(bound.values())), "tape", None)
    hidden, _ = forward(model, ids, pad, tape=tape, bound=bound, logit_rows=np.zeros(0, dtype=np.int64))
    keep = (~pad)[..., None].astype(np.float64)
    return ops.sum_(hidden[-1] * keep, axis=1) * (1.0 / keep.sum(axis=1))


def fine_tune(model, dataset: IntentDataset, config: IntentConfig | None = None) -> FineTunedClassifier:
    """Train the encoder and an MLP head on the last layer's mean-pooled output.

    The backbone is copied, so ``model`` itself is never modified. Dropout is
    off, which makes a zero backbone learning rate equivalent to training the
    same head on frozen ``enc_{l-1}`` features.
    """
    from .prodbert import ProdBertModel, _encode_rows

    if not isinstance(model, ProdBertModel) or not model.params:
        raise ValueError("fine_tune needs a pre-trained ProdBERT model")
    if model.metadata.get("epochs_completed", 0) < 1:
        raise ValueError("fine_tune refuses an untrained backbone; pre-train it with train_mlm first")
    cfg = config if config is not None else IntentConfig()
    backbone = ProdBertModel(model.config, model.vocab, {k: v.copy() for k, v in model.params.items()},
                             dict(model.metadata))
    last = f"enc_{model.n_layers - 1}"
    splits = {name: dataset.split(name) for name in ("train", "validation", "test")}
    y = {name: dataset.labels(s) for name, s in splits.items()}
    y["train"] = _check_labels(y["train"])
    rows = _encode_rows(backbone, splits["train"])

    rng = np.random.default_rng([cfg.seed, 6])
    Xtr0 = featurize_sessions(backbone, splits["train"], last)
    mean, scale = _feature_stats(Xtr0)
    head = MlpClassifier(cfg, init_head(Xtr0.shape[1], cfg, rng), mean, scale)
    clf = FineTunedClassifier(backbone, head, {})

    def batch_logits(idx, bound):
        pooled = _pooled_on_tape(backbone, [rows[i] for i in idx], bound[0])
        return head.logits(pooled, bound[1])

    def evaluate():
        return (accuracy(clf.predict(splits["train"]), y["train"]),
                accuracy(clf.predict(splits["validation"]), y["validation"]))

    fit = _fit([(backbone.params, cfg.backbone_lr), (head.params, cfg.head_lr)], batch_logits,
               len(rows), y["train"], evaluate, cfg, cfg.fine_tune_epochs, rng)
    clf.history = fit.history
    head_hash = config_hash(cfg)
    head.metadata.update(config_hash=head_hash, best_epoch=fit.best_epoch, epochs_run=fit.epochs_run)
    proba = clf.predict_proba(splits["test"])
    overfit = _overfit(fit.history, cfg.overfit_gap)
    if overfit:
        logger.warning("fine-tuning overfits: train/validation accuracy gap above %.2f", cfg.overfit_gap)
    clf.report = IntentReport(
        strategy="fine_tune",
        accuracy=accuracy(proba >= 0.5, y["test"]),
        epochs=fit.epochs_run,
        best_epoch=fit.best_epoch,
        overfit=overfit,
        seed=cfg.seed,
        backbone_config_hash=model.metadata.get("config_hash", ""),
        head_config_hash=head_hash,
        auc=_auc(y["test"], proba),
        train_accuracy=fit.history["train_acc"][fit.best_epoch - 1] if fit.best_epoch else None,
        val_accuracy=max(fit.history["val_acc"]) if fit.history["val_acc"] else None,
    )
    return clf


# -- LSTM baseline -----------------------------------------------------------------


@dataclass
class LstmClassifier:
    config: IntentConfig
    params: dict
    embeddings: np.ndarray
    vocab: object
    metadata: dict = field(default_factory=dict)

    def encode(self, sessions: Sequence) -> list[np.ndarray]:
        """Map items to embedding rows; unknown products use the zero UNK row."""
        stoi = self.vocab.stoi
        return [np.array([stoi.get(it, UNK) for it in (s.items if isinstance(s, Session) else s)])
                for s in sessions]

    def logits(self, rows: list[np.ndarray], P: dict | None = None):
        P = self.params if P is None else P
        ids, pad = pad_ids(rows)
        X = self.embeddings[ids]
        B, T = ids.shape
        H = self.config.hidden
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        for t in range(T):
            live = (~pad[:, t])[:, None].astype(np.float64)
            h_new, c_new = lstm_cell(X[:, t], h, c, P)
            h = h_new * live + h * (1.0 - live)
            c = c_new * live + c * (1.0 - live)
        return h @ P["w_out"] + P["b_out"]

    def predict_proba(self, sessions: Sequence) -> np.ndarray:
        out = []
        rows = self.encode(sessions)
        for start in range(0, len(rows), 512):
            z = self.logits(rows[start : start + 512]).value
            out.append(1.0 / (1.0 + np.exp(-z)))
        return np.concatenate(out) if out else np.zeros(0)

    def predict(self, sessions: Sequence) -> np.ndarray:
        return (self.predict_proba(sessions) >= 0.5).astype(np.int64)


def lstm_cell(x, h, c, P: dict):
    """One LSTM step; gate order in the fused weights is input, forget, cell, output."""
    H = P["wh"].shape[0]
    z = x @ P["wx"] + h @ P["wh"] + P["b"]
    i = ops.sigmoid(ops.getitem(z, (Ellipsis, slice(0, H))))
    f = ops.sigmoid(ops.getitem(z, (Ellipsis, slice(H, 2 * H))))
    g = ops.tanh(ops.getitem(z, (Ellipsis, slice(2 * H, 3 * H))))
    o = ops.sigmoid(ops.getitem(z, (Ellipsis, slice(3 * H, 4 * H))))
    c_new = f * c + i * g
    return o * ops.tanh(c_new), c_new


def init_lstm(in_dim: int, config: IntentConfig, rng) -> dict:
    H = config.hidden
    b = np.zeros(4 * H)
    b[H : 2 * H] = 1.0  # forget-gate bias starts open
    lim_x, lim_h = math.sqrt(6.0 / (in_dim + 4 * H)), math.sqrt(6.0 / (5 * H))
    return {
        "wx": rng.uniform(-lim_x, lim_x, size=(in_dim, 4 * H)),
        "wh": rng.uniform(-lim_h, lim_h, size=(H, 4 * H)),
        "b": b,
        "w_out": rng.normal(scale=math.sqrt(1.0 / H), size=H),
        "b_out": np.zeros(()),
    }


def train_intent_lstm(p2v_model, dataset: IntentDataset, config: IntentConfig | None = None
                      ) -> tuple[LstmClassifier, IntentReport]:
    """LSTM over frozen prod2vec vectors, early-stopped on validation accuracy."""
    cfg = config if config is not None else IntentConfig()
    emb = np.array(p2v_model.w_in, dtype=np.float64, copy=True)
    emb[UNK] = 0.0
    rng = np.random.default_rng([cfg.seed, 7])
    clf = LstmClassifier(cfg, init_lstm(emb.shape[1], cfg, rng), emb, p2v_model.vocab)
    splits = {name: dataset.split(name) for name in ("train", "validation", "test")}
    y = {name: dataset.labels(s) for name, s in splits.items()}
    y["train"] = _check_labels(y["train"])
    rows = clf.encode(splits["train"])

    def evaluate():
        return (accuracy(clf.predict(splits["train"]), y["train"]),
                accuracy(clf.predict(splits["validation"]), y["validation"]))

    fit = _fit([(clf.params, cfg.learning_rate)], lambda idx, b: clf.logits([rows[i] for i in idx], b[0]),
               len(rows), y["train"], evaluate, cfg, cfg.max_epochs, rng)
    head_hash = config_hash(cfg)
    clf.metadata.update(config_hash=head_hash, best_epoch=fit.best_epoch, epochs_run=fit.epochs_run)
    proba = clf.predict_proba(splits["test"])
    report = IntentReport(
        strategy="lstm",
        accuracy=accuracy(proba >= 0.5, y["test"]),
        epochs=fit.epochs_run,
        best_epoch=fit.best_epoch,
        overfit=_overfit(fit.history, cfg.overfit_gap),
        seed=cfg.seed,
        backbone_config_hash=p2v_model.metadata.get("config_hash", ""),
        head_config_hash=head_hash,
        auc=_auc(y["test"], proba),
        train_accuracy=fit.history["train_acc"][fit.best_epoch - 1] if fit.best_epoch else None,
        val_accuracy=max(fit.history["val_acc"]) if fit.history["val_acc"] else None,
    )
    return clf, report


__all__ = [
    "FineTunedClassifier",
    "IntentConfig",
    "IntentDataset",
    "IntentReport",
    "LstmClassifier",
    "MlpClassifier",
    "accuracy",
    "build_intent_dataset",
    "check_strategy",
    "evaluate_strategy",
    "featurize",
    "featurize_sessions",
    "fine_tune",
    "init_head",
    "init_lstm",
    "lstm_cell",
    "shuffle_labels",
    "train_intent_classifier",
    "train_intent_lstm",
]
