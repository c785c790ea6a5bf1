"""prod2vec baseline: CBOW with negative sampling over shopping sessions."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ._io import config_hash, load_container, save_container
from .session_data import N_SPECIAL, Session, Vocabulary, build_vocab

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Prod2vecConfig:
    window: int = 15
    iterations: int = 30
    ns_exponent: float = 0.75
    dimensions: int = 48
    negative: int = 5
    alpha: float = 0.025
    min_alpha: float = 0.0001
    batch_size: int = 64
    shrink_window: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.dimensions < 1:
            raise ValueError("dimensions must be >= 1")
        if not 0.0 <= self.ns_exponent <= 1.0:
            raise ValueError("ns_exponent must be in [0, 1]")
        if self.negative < 1 or self.iterations < 1:
            raise ValueError("negative and iterations must be >= 1")


@dataclass
class Prod2vecModel:
    config: Prod2vecConfig
    vocab: Vocabulary
    w_in: np.ndarray
    w_out: np.ndarray
    counts: np.ndarray
    noise: np.ndarray
    metadata: dict = field(default_factory=dict)

    def vector(self, product_id: str) -> np.ndarray:
        if product_id not in self.vocab:
            raise KeyError(f"product {product_id!r} not in vocabulary")
        return self.w_in[self.vocab.stoi[product_id]]


def noise_distribution(counts: np.ndarray, exponent: float) -> np.ndarray:
    """Negative-sampling probabilities proportional to ``count ** exponent``.

    Tokens with zero count (the reserved specials) are never drawn.
    """
    counts = np.asarray(counts, dtype=np.float64)
    w = np.where(counts > 0, counts**exponent, 0.0)
    return w / w.sum()


def draw_negatives(noise: np.ndarray, size, rng) -> np.ndarray:
    cdf = np.cumsum(noise)
    cdf /= cdf[-1]
    out = np.searchsorted(cdf, rng.random(size), side="right")
    return np.minimum(out, len(noise) - 1)


def _cbow_core(w_in, w_out, ctx, m, targets, labels, weights):
    count = m.sum(axis=1, keepdims=True)
    h = (w_in[ctx] * m[..., None]).sum(axis=1) / count
    out_vecs = w_out[targets]
    score = np.einsum("bd,bkd->bk", h, out_vecs)
    w = np.ones_like(score) if weights is None else weights
    # -log sigmoid(+s) for positives, -log sigmoid(-s) for negatives
    sign = np.where(labels > 0, 1.0, -1.0)
    z = sign * score
    loss = float(np.sum(w * (np.maximum(-z, 0) + np.log1p(np.exp(-np.abs(z))))))
    sig = 1.0 / (1.0 + np.exp(-score))
    dscore = w * (sig - labels)
    g_out = dscore[..., None] * h[:, None, :]
    g_slot = np.einsum("bk,bkd->bd", dscore, out_vecs) / count
    return loss, g_slot, g_out


def cbow_batch(w_in, w_out, ctx, ctx_mask, targets, labels, weights=None):
    """Negative-sampling CBOW loss for a batch and its sparse gradients.

    ``ctx`` / ``ctx_mask`` are ``[B, C]`` context ids and validity flags,
    ``targets`` / ``labels`` are ``[B, 1+K]`` (the true center first, label 1).
    The context vector is the mean of the valid input embeddings.

    Returns ``(loss, g_in_rows, g_out_rows)`` where ``g_in_rows`` is
    ``[B, C, D]`` (zero on invalid slots) aligned with ``ctx`` and
    ``g_out_rows`` is ``[B, 1+K, D]`` aligned with ``targets``.
    """
    m = ctx_mask.astype(w_in.dtype)
    loss, g_slot, g_out = _cbow_core(w_in, w_out, ctx, m, targets, labels, weights)
    return loss, g_slot[:, None, :] * m[..., None], g_out


def _scatter_add(table: np.ndarray, rows: np.ndarray, values: np.ndarray, scale: float) -> None:
    """``table[rows] += scale * values`` with repeated rows accumulated."""
    V, D = table.shape
    flat = (rows[:, None] * D + np.arange(D)[None, :]).ravel()
    table += scale * np.bincount(flat, weights=values.ravel(), minlength=V * D).reshape(V, D)


def _centers(rows: list[np.ndarray], window: int, rng, shrink: bool):
    """Flatten every (session, position) into center ids with padded context."""
    lens = np.array([len(r) for r in rows])
    maxlen = int(lens.max())
    width = min(2 * window, 2 * (maxlen - 1))
    grid = np.zeros((len(rows), maxlen), dtype=np.int64)
    live = np.arange(maxlen)[None, :] < lens[:, None]
    grid[live] = np.concatenate(rows)
    sess, pos = np.nonzero(live)
    n = len(sess)
    b = rng.integers(1, window + 1, size=n) if shrink else np.full(n, window)
    offsets = np.array([o for o in range(-window, window + 1) if o != 0])
    j = pos[:, None] + offsets[None, :]
    ok = (j >= 0) & (j < lens[sess, None]) & (np.abs(offsets)[None, :] <= b[:, None])
    ids = grid[sess[:, None], np.clip(j, 0, maxlen - 1)]
    # pack valid context to the left so the width can be trimmed
    order = np.argsort(~ok, axis=1, kind="stable")[:, :width]
    ctx = np.take_along_axis(ids, order, axis=1)
    mask = np.take_along_axis(ok, order, axis=1)
    centers = grid[sess, pos]
    keep = mask.any(axis=1)
    return centers[keep], ctx[keep], mask[keep]


def train_cbow(sessions: Sequence, config: Prod2vecConfig | None = None,
               vocab: Vocabulary | None = None) -> tuple[Prod2vecModel, dict]:
    """Train CBOW embeddings with linearly decaying learning rate.

    Single-threaded and bitwise deterministic given ``config.seed``.
    Returns the model and ``{"loss": [...]}``, the mean loss per iteration.
    """
    cfg = config if config is not None else Prod2vecConfig()
    vocab = vocab if vocab is not None else build_vocab(sessions)
    if vocab.n_products < 2:
        raise ValueError("need at least 2 distinct products for negative sampling")
    rng = np.random.default_rng([cfg.seed, 2])
    rows = [vocab.encode(s.items if isinstance(s, Session) else s) for s in sessions]
    counts = np.bincount(np.concatenate(rows), minlength=len(vocab)).astype(np.int64)
    counts[:N_SPECIAL] = 0
    noise = noise_distribution(counts, cfg.ns_exponent)
    V, D = len(vocab), cfg.dimensions
    w_in = ((rng.random((V, D)) - 0.5) / D).astype(np.float64)
    w_in[:N_SPECIAL] = 0.0
    w_out = np.zeros((V, D), dtype=np.float64)
    n_centers = sum(len(r) for r in rows)
    total_steps = cfg.iterations * math.ceil(n_centers / cfg.batch_size)
    step = 0
    history = {"loss": []}
    for it in range(cfg.iterations):
        centers, ctx, mask = _centers(rows, cfg.window, rng, cfg.shrink_window)
        perm = rng.permutation(len(centers))
        total, n_pairs = 0.0, 0
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            lr = max(cfg.min_alpha, cfg.alpha - (cfg.alpha - cfg.min_alpha) * step / total_steps)
            negs = draw_negatives(noise, (len(idx), cfg.negative), rng)
            targets = np.concatenate([centers[idx, None], negs], axis=1)
            labels = np.zeros(targets.shape)
            labels[:, 0] = 1.0
            weights = np.ones(targets.shape)
            weights[:, 1:] = negs != centers[idx, None]
            live = mask[idx]
            width = int(live.sum(axis=1).max())  # valid slots are packed to the left
            live, bctx = live[:, :width], ctx[idx, :width]
            loss, g_slot, g_out = _cbow_core(w_in, w_out, bctx, live.astype(w_in.dtype),
                                             targets, labels, weights)
            _scatter_add(w_out, targets.ravel(), g_out.reshape(-1, D), -lr)
            rows_of = np.broadcast_to(np.arange(len(idx))[:, None], live.shape)[live]
            _scatter_add(w_in, bctx[live], g_slot[rows_of], -lr)
            total += loss
            n_pairs += len(idx)
            step += 1
        history["loss"].append(total / n_pairs)
        logger.debug("prod2vec iteration %d loss %.4f", it + 1, history["loss"][-1])
    model = Prod2vecModel(cfg, vocab, w_in, w_out, counts, noise,
                          {"config_hash": config_hash(cfg), "seed": cfg.seed})
    return model, history


def session_vector(model: Prod2vecModel, items: Sequence[str]) -> np.ndarray:
    """Arithmetic mean of the items' input embeddings."""
    if len(items) == 0:
        raise ValueError("cannot build a session vector from no items")
    missing = [it for it in items if it not in model.vocab]
    if missing:
        raise KeyError(f"out-of-vocabulary products: {missing[:5]}")
    return model.w_in[[model.vocab.stoi[it] for it in items]].mean(axis=0)


def knn_rank(model: Prod2vecModel, queries: np.ndarray, k: int) -> np.ndarray:
    """Top-``k`` product indices by cosine similarity, ties broken by index."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    qn = np.linalg.norm(q, axis=1)
    if np.any(qn == 0):
        raise ValueError("zero-norm query vector")
    emb = model.w_in[N_SPECIAL:]
    en = np.linalg.norm(emb, axis=1)
    en[en == 0] = 1.0
    sims = (q / qn[:, None]) @ (emb / en[:, None]).T
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    return order + N_SPECIAL


def knn_predict(model: Prod2vecModel, query_vector, k: int = 10) -> list[str]:
    if k < 1 or k > model.vocab.n_products:
        raise ValueError(f"K must be in [1, {model.vocab.n_products}], got {k}")
    return model.vocab.decode(knn_rank(model, query_vector, k)[0])


def export_embeddings(model: Prod2vecModel, path) -> None:
    """word2vec text format: ``<vocab> <dim>`` header, then ``<id> <v1> ... <vdim>``."""
    products = model.vocab.itos[N_SPECIAL:]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{len(products)} {model.w_in.shape[1]}\n")
        for i, pid in enumerate(products, start=N_SPECIAL):
            fh.write(pid + " " + " ".join(repr(float(x)) for x in model.w_in[i]) + "\n")


def read_embeddings(path) -> tuple[list, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        n, d = (int(x) for x in fh.readline().split())
        ids, vecs = [], []
        for line in fh:
            parts = line.rstrip("\n").split(" ")
            ids.append(parts[0])
            vecs.append([float(x) for x in parts[1:]])
    arr = np.array(vecs, dtype=np.float64).reshape(n, d)
    return ids, arr


def save_model(model: Prod2vecModel, path) -> None:
    meta = {
        "kind": "prod2vec",
        "config": asdict(model.config),
        "vocab": model.vocab.itos,
        "vocab_hash": model.vocab.hash(),
        "metadata": model.metadata,
    }
    arrays = {"w_in": model.w_in, "w_out": model.w_out, "counts": model.counts}
    save_container(path, meta, arrays)


def load_model(path, vocab: Vocabulary | None = None) -> Prod2vecModel:
    meta, arrays = load_container(path)
    if meta.get("kind") != "prod2vec":
        raise ValueError(f"{path} is not a prod2vec model")
    stored = Vocabulary(meta["vocab"])
    if vocab is not None and vocab.hash() != meta["vocab_hash"]:
        raise ValueError(f"{path}: vocabulary hash mismatch")
    cfg = Prod2vecConfig(**meta["config"])
    noise = noise_distribution(arrays["counts"], cfg.ns_exponent)
    return Prod2vecModel(cfg, stored, arrays["w_in"], arrays["w_out"], arrays["counts"], noise,
                         meta.get("metadata", {}))
