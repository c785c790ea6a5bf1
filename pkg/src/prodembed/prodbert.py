"""BERT-style encoder over product-ID sessions trained with masked session modeling.

Architecture: learned token + positional embeddings, a stack of pre-norm
blocks (multi-head self-attention then a GELU feed-forward network), a final
layer norm, and an output projection tied to the token embedding.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ._io import config_hash, load_container, save_container
from .numerics import AdamState, GradTape, adam_step, masked_cross_entropy, ops, softmax
from .numerics import truncated_normal
from .session_data import (
    MASK,
    MAX_LEN,
    N_SPECIAL,
    MaskedBatch,
    Session,
    Vocabulary,
    mask_batch,
    pad_ids,
)

logger = logging.getLogger(__name__)

_LAYER_PARAMS = (
    "ln1.g", "ln1.b",
    "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
    "ln2.g", "ln2.b",
    "w1", "b1", "w2", "b2",
)  # fmt: skip


@dataclass(frozen=True)
class ProdBertConfig:
    epochs: int = 10
    layers: int = 4
    mask_prob: float = 0.25
    duplicated: bool = False
    dim: int = 64
    heads: int = 4
    ffn_dim: int = 256
    batch_size: int = 64
    max_len: int = MAX_LEN
    dropout: float = 0.1
    learning_rate: float = 1e-3
    warmup_frac: float = 0.0
    masking: str = "static"
    random_replace: bool = False
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if not 0.0 < self.mask_prob < 1.0:
            raise ValueError("mask_prob must be in (0, 1)")
        if self.dim % self.heads:
            raise ValueError(f"embedding size {self.dim} not divisible by {self.heads} heads")
        if self.masking not in ("static", "dynamic"):
            raise ValueError("masking must be 'static' or 'dynamic'")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


@dataclass
class ProdBertModel:
    config: ProdBertConfig
    vocab: Vocabulary
    params: dict
    metadata: dict = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return self.config.layers

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


def expected_parameter_count(config: ProdBertConfig, vocab_size: int) -> int:
    d, f = config.dim, config.ffn_dim
    per_layer = 4 * (d * d + d) + 2 * (2 * d) + (d * f + f) + (f * d + d)
    return vocab_size * d + config.max_len * d + config.layers * per_layer + 2 * d + vocab_size


def init_model(config: ProdBertConfig, vocab: Vocabulary, rng=None) -> ProdBertModel:
    """Fresh model with truncated-normal(0.02) weights, zero biases, unit norms."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    dt = np.dtype(config.dtype)
    d, f, v = config.dim, config.ffn_dim, len(vocab)

    def tn(*shape):
        return truncated_normal(rng, shape, 0.02, dt)

    params = {"tok_emb": tn(v, d), "pos_emb": tn(config.max_len, d)}
    for i in range(config.layers):
        p = f"l{i}."
        params.update({
            p + "ln1.g": np.ones(d, dt), p + "ln1.b": np.zeros(d, dt),
            p + "wq": tn(d, d), p + "bq": np.zeros(d, dt),
            p + "wk": tn(d, d), p + "bk": np.zeros(d, dt),
            p + "wv": tn(d, d), p + "bv": np.zeros(d, dt),
            p + "wo": tn(d, d), p + "bo": np.zeros(d, dt),
            p + "ln2.g": np.ones(d, dt), p + "ln2.b": np.zeros(d, dt),
            p + "w1": tn(d, f), p + "b1": np.zeros(f, dt),
            p + "w2": tn(f, d), p + "b2": np.zeros(d, dt),
        })  # fmt: skip
    params["lnf.g"] = np.ones(d, dt)
    params["lnf.b"] = np.zeros(d, dt)
    params["out_bias"] = np.zeros(v, dt)
    return ProdBertModel(config, vocab, params, {"config_hash": config_hash(config)})


def _check_ids(model: ProdBertModel, input_ids: np.ndarray) -> None:
    if input_ids.ndim != 2:
        raise ValueError(f"input_ids must be 2-D, got shape {input_ids.shape}")
    if input_ids.shape[1] > model.config.max_len:
        raise ValueError(f"sequence length {input_ids.shape[1]} > max_len {model.config.max_len}")
    if input_ids.size and (input_ids.min() < 0 or input_ids.max() >= len(model.vocab)):
        raise ValueError("input contains token indices outside the vocabulary")


def forward(
    model: ProdBertModel,
    input_ids: np.ndarray,
    pad_flags: np.ndarray | None = None,
    *,
    tape: GradTape | None = None,
    bound: dict | None = None,
    rng: np.random.Generator | None = None,
    logit_rows: np.ndarray | None = None,
    return_attention: bool = False,
):
    """Run the encoder.

    Returns ``(hidden, logits)`` where ``hidden[i]`` is the ``[B, T, D]``
    output of block ``i`` and ``logits`` is ``[N, V]`` for the flattened
    positions in ``logit_rows`` (all ``B*T`` positions by default). Pass a
    ``tape`` together with ``bound`` (parameters watched on that tape) to
    record gradients, and ``rng`` to enable dropout.
    """
    input_ids = np.asarray(input_ids)
    _check_ids(model, input_ids)
    if pad_flags is None:
        pad_flags = np.zeros(input_ids.shape, dtype=bool)
    cfg = model.config
    P = bound if bound is not None else model.params
    B, T = input_ids.shape
    H, dh = cfg.heads, cfg.dim // cfg.heads
    drop = cfg.dropout if rng is not None else 0.0
    scale = 1.0 / math.sqrt(dh)
    key_mask = (~np.asarray(pad_flags, dtype=bool))[:, None, None, :]

    x = ops.take_rows(P["tok_emb"], input_ids) + ops.getitem(P["pos_emb"], slice(0, T))
    x = ops.dropout(x, drop, rng)
    hidden, attn = [], []
    for i in range(cfg.layers):
        p = f"l{i}."
        h = ops.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])

        def heads(w, b):
            y = ops.reshape(h @ P[w] + P[b], (B, T, H, dh))
            return ops.transpose(y, (0, 2, 1, 3))

        q, k, v = heads(p + "wq", p + "bq"), heads(p + "wk", p + "bk"), heads(p + "wv", p + "bv")
        scores = ops.mul(q @ ops.transpose(k, (0, 1, 3, 2)), scale)
        probs = ops.masked_softmax(scores, key_mask)
        if return_attention:
            attn.append(probs.value)
        probs = ops.dropout(probs, drop, rng)
        ctx = ops.reshape(ops.transpose(probs @ v, (0, 2, 1, 3)), (B, T, cfg.dim))
        x = x + ops.dropout(ctx @ P[p + "wo"] + P[p + "bo"], drop, rng)
        h2 = ops.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
        ff = ops.gelu(h2 @ P[p + "w1"] + P[p + "b1"]) @ P[p + "w2"] + P[p + "b2"]
        x = x + ops.dropout(ff, drop, rng)
        hidden.append(x)

    final = ops.reshape(ops.layer_norm(x, P["lnf.g"], P["lnf.b"]), (B * T, cfg.dim))
    if logit_rows is not None:
        final = ops.getitem(final, np.asarray(logit_rows))
    logits = final @ ops.transpose(P["tok_emb"], (1, 0)) + P["out_bias"]
    if tape is None:
        hidden = [h.value for h in hidden]
        logits = logits.value
    if return_attention:
        return hidden, logits, attn
    return hidden, logits


def mlm_loss(model: ProdBertModel, batch: MaskedBatch, *, tape=None, bound=None, rng=None):
    """Masked-token cross-entropy; logits are computed only at masked positions."""
    rows = np.flatnonzero(batch.mask_flags.ravel())
    _, logits = forward(
        model, batch.input_ids, batch.pad_flags, tape=tape, bound=bound, rng=rng, logit_rows=rows
    )
    targets = batch.target_ids.ravel()[rows]
    return masked_cross_entropy(logits, targets, np.ones(len(rows), dtype=bool))


def loss_and_grads(model: ProdBertModel, batch: MaskedBatch, rng=None) -> tuple[float, dict]:
    tape = GradTape()
    bound = {k: tape.watch(v) for k, v in model.params.items()}
    loss = mlm_loss(model, batch, tape=tape, bound=bound, rng=rng)
    names = list(bound)
    grads = tape.gradient(loss, [bound[k] for k in names])
    return float(loss.value), dict(zip(names, grads))


def _length_bucketed_batches(lengths: np.ndarray, batch_size: int, rng) -> list[np.ndarray]:
    # sort within chunks of 50 batches so padding stays small but order stays random
    perm = rng.permutation(len(lengths))
    chunk = batch_size * 50
    batches = []
    for start in range(0, len(perm), chunk):
        part = perm[start : start + chunk]
        part = part[np.argsort(lengths[part], kind="stable")]
        batches.extend(part[i : i + batch_size] for i in range(0, len(part), batch_size))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def _encode_rows(model: ProdBertModel, sessions: Sequence) -> list[np.ndarray]:
    rows = []
    for s in sessions:
        items = s.items if isinstance(s, Session) else s
        ids = model.vocab.encode(items) if len(items) and isinstance(items[0], str) else np.asarray(items)
        if len(ids) > model.config.max_len:
            raise ValueError(f"session of length {len(ids)} exceeds max_len {model.config.max_len}")
        rows.append(ids)
    return rows


def evaluate_mlm(model: ProdBertModel, sessions: Sequence, seed: int = 1, batch_size: int = 512) -> float:
    """Mean masked-token loss on ``sessions`` under a fixed seeded mask."""
    rows = _encode_rows(model, sessions)
    full = mask_batch(rows, model.config.mask_prob, np.random.default_rng(seed), model.config.max_len)
    total, count = 0.0, 0
    for start in range(0, len(rows), batch_size):
        idx = np.arange(start, min(start + batch_size, len(rows)))
        batch = full.rows(idx)
        n = int(batch.mask_flags.sum())
        total += float(mlm_loss(model, batch).value) * n
        count += n
    return total / count


def train_mlm(
    model: ProdBertModel,
    sessions: Sequence,
    config: ProdBertConfig | None = None,
    validation: Sequence | None = None,
    progress: bool = False,
) -> tuple[ProdBertModel, dict]:
    """Train ``model`` in place with the masked-session objective.

    ``sessions`` must already be length-filtered and, when
    ``config.duplicated`` is set, duplicated. With static masking every row is
    masked once before the first epoch, so duplicated copies are the only
    source of distinct mask patterns.
    """
    cfg = config if config is not None else model.config
    rng = np.random.default_rng([cfg.seed, 1])
    rows = _encode_rows(model, sessions)
    if not rows:
        raise ValueError("empty training corpus")
    lengths = np.array([len(r) for r in rows])
    V = len(model.vocab)

    def draw_masks():
        return mask_batch(rows, cfg.mask_prob, rng, cfg.max_len, cfg.random_replace, V)

    masked = draw_masks()
    steps_per_epoch = math.ceil(len(rows) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    warmup = int(cfg.warmup_frac * total_steps)
    state = AdamState.for_params(model.params, lr=cfg.learning_rate)
    history = {"train_loss": [], "val_loss": []}
    diverged_warned = False
    check_from = max(1, math.ceil(0.2 * cfg.epochs))
    step = 0
    for epoch in range(cfg.epochs):
        if cfg.masking == "dynamic" and epoch > 0:
            masked = draw_masks()
        total, count = 0.0, 0
        for b, idx in enumerate(_length_bucketed_batches(lengths, cfg.batch_size, rng)):
            batch = masked.rows(idx)
            try:
                loss, grads = loss_and_grads(model, batch, rng=rng if cfg.dropout > 0 else None)
            except FloatingPointError:
                loss = math.nan
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite MLM loss at epoch {epoch}, batch {b}; "
                    f"try a lower learning rate (now {cfg.learning_rate})"
                )
            step += 1
            state.lr = cfg.learning_rate * min(1.0, step / warmup) if warmup else cfg.learning_rate
            adam_step(model.params, grads, state)
            n = int(batch.mask_flags.sum())
            total += loss * n
            count += n
        history["train_loss"].append(total / count)
        if validation:
            history["val_loss"].append(evaluate_mlm(model, validation, seed=cfg.seed + 7919))
        curve = history["val_loss"] if validation else history["train_loss"]
        monitored = curve[-1]
        # above the uniform-prediction loss and no longer improving
        stalled = len(curve) >= 2 and monitored >= curve[-2]
        if epoch + 1 >= check_from and monitored > math.log(V) and stalled and not diverged_warned:
            warnings.warn(
                f"MLM training looks diverged: loss {monitored:.3f} > ln(V) = {math.log(V):.3f} "
                f"after epoch {epoch + 1}",
                RuntimeWarning,
                stacklevel=2,
            )
            diverged_warned = True
        if progress:
            logger.info("epoch %d/%d train %.4f %s", epoch + 1, cfg.epochs, history["train_loss"][-1],
                        f"val {history['val_loss'][-1]:.4f}" if validation else "")
    model.metadata.update(
        config_hash=config_hash(cfg), seed=cfg.seed, epochs_completed=cfg.epochs, steps=step
    )
    return model, history


def masked_logits(model: ProdBertModel, rows: Sequence[np.ndarray], positions: Sequence[int],
                  batch_size: int = 512) -> np.ndarray:
    """Logits ``[n, V]`` at ``positions[i]`` of ``rows[i]`` after masking that position."""
    out = np.empty((len(rows), len(model.vocab)), dtype=np.float64)
    for start in range(0, len(rows), batch_size):
        chunk = [np.array(r, copy=True) for r in rows[start : start + batch_size]]
        pos = np.asarray(positions[start : start + batch_size])
        for r, p in zip(chunk, pos):
            if not 0 <= p < len(r):
                raise IndexError(f"masked position {p} outside session of length {len(r)}")
            r[p] = MASK
        ids, pad = pad_ids(chunk)
        flat = np.arange(len(chunk)) * ids.shape[1] + pos
        _, logits = forward(model, ids, pad, logit_rows=flat)
        out[start : start + len(chunk)] = logits
    return out


def rank_products(logits: np.ndarray, k: int) -> np.ndarray:
    """Top-``k`` product indices per row, specials excluded, ties by index."""
    scores = np.atleast_2d(logits)[:, N_SPECIAL:]
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return order + N_SPECIAL


def predict_masked(model: ProdBertModel, session, masked_position: int, k: int = 10):
    """Top-``k`` ``(product_id, probability)`` pairs for the masked position."""
    if k < 1:
        raise ValueError("K must be >= 1")
    if k > model.vocab.n_products:
        raise ValueError(f"K={k} exceeds the {model.vocab.n_products} products in the vocabulary")
    row = _encode_rows(model, [session])[0]
    logits = masked_logits(model, [row], [masked_position])[0]
    probs = softmax(logits)
    top = rank_products(logits, k)[0]
    return [(model.vocab.itos[i], float(probs[i])) for i in top]


def _selector_layers(model: ProdBertModel, selector: str) -> list[int]:
    if selector == "concat":
        return list(range(model.n_layers))
    if selector.startswith("enc_"):
        i = int(selector[4:])
        if not 0 <= i < model.n_layers:
            raise IndexError(f"layer {i} out of range for a {model.n_layers}-layer model")
        return [i]
    raise ValueError(f"unknown selector {selector!r}; expected enc_<i> or concat")


def pooled_layers(model: ProdBertModel, sessions: Sequence, batch_size: int = 512) -> np.ndarray:
    """Mean-pooled hidden states of every layer: ``[n, layers, dim]``."""
    rows = _encode_rows(model, sessions)
    out = np.empty((len(rows), model.n_layers, model.config.dim), dtype=np.float64)
    for start in range(0, len(rows), batch_size):
        ids, pad = pad_ids(rows[start : start + batch_size])
        hidden, _ = forward(model, ids, pad, logit_rows=np.zeros(0, dtype=np.int64))
        keep = (~pad)[..., None].astype(np.float64)
        denom = keep.sum(axis=1)
        for i, h in enumerate(hidden):
            out[start : start + len(ids), i] = (h * keep).sum(axis=1) / denom
    return out


def encode_sessions(model: ProdBertModel, sessions: Sequence, selector: str = "enc_0") -> np.ndarray:
    """Session vectors: ``enc_i`` mean-pools layer ``i``; ``concat`` joins all layers."""
    layers = _selector_layers(model, selector)
    pooled = pooled_layers(model, sessions)
    return pooled[:, layers, :].reshape(len(pooled), -1)


def encode_session(model: ProdBertModel, session, selector: str = "enc_0") -> np.ndarray:
    return encode_sessions(model, [session], selector)[0]


def save_checkpoint(model: ProdBertModel, path) -> None:
    meta = {
        "kind": "prodbert",
        "config": asdict(model.config),
        "vocab": model.vocab.itos,
        "vocab_hash": model.vocab.hash(),
        "metadata": model.metadata,
        "shapes": {k: list(v.shape) for k, v in model.params.items()},
    }
    save_container(path, meta, model.params)


def load_checkpoint(path, vocab: Vocabulary | None = None) -> ProdBertModel:
    """Load a checkpoint; refuses one trained on a different vocabulary."""
    meta, arrays = load_container(path)
    if meta.get("kind") != "prodbert":
        raise ValueError(f"{path} is not a ProdBERT checkpoint")
    stored = Vocabulary(meta["vocab"])
    if stored.hash() != meta["vocab_hash"]:
        raise ValueError(f"{path}: vocabulary hash does not match stored vocabulary")
    if vocab is not None and vocab.hash() != meta["vocab_hash"]:
        raise ValueError(
            f"{path}: checkpoint vocabulary hash {meta['vocab_hash'][:12]} does not match "
            f"provided vocabulary {vocab.hash()[:12]}"
        )
    config = ProdBertConfig(**meta["config"])
    for k, shape in meta["shapes"].items():
        if list(arrays[k].shape) != shape:
            raise ValueError(f"{path}: parameter {k} has shape {arrays[k].shape}, expected {shape}")
    return ProdBertModel(config, stored, arrays, meta.get("metadata", {}))
