"""Session logs: ingestion, length filtering, vocabulary, masking, splits.

Session-log format: UTF-8 text, one session per line, product IDs separated
by single spaces, optionally followed by a tab and a ``0``/``1`` add-to-cart
label.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

PAD, MASK, UNK = 0, 1, 2
SPECIAL_TOKENS = ("[PAD]", "[MASK]", "[UNK]")
N_SPECIAL = len(SPECIAL_TOKENS)
MIN_LEN, MAX_LEN = 3, 20


class SessionFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Session:
    items: tuple
    add_to_cart: bool | None = None
    session_id: str | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        for it in self.items:
            if not isinstance(it, str) or not it or any(c.isspace() for c in it):
                raise SessionFormatError(f"invalid product id {it!r}")

    def __len__(self):
        return len(self.items)


def _as_items(s) -> tuple:
    return s.items if isinstance(s, Session) else tuple(s)


def ingest(path: str | os.PathLike) -> list[Session]:
    """Read a session-log file, one :class:`Session` per line."""
    sessions = []
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            label = None
            if "\t" in line:
                body, _, tag = line.partition("\t")
                if tag not in ("0", "1"):
                    raise SessionFormatError(f"line {lineno}: label must be 0 or 1, got {tag!r}")
                label = tag == "1"
            else:
                body = line
            items = body.split(" ")
            if not body or any(not it for it in items):
                raise SessionFormatError(f"line {lineno}: malformed session {line!r}")
            try:
                sessions.append(Session(items, label, session_id=str(lineno - 1)))
            except SessionFormatError as exc:
                raise SessionFormatError(f"line {lineno}: {exc}") from None
    if not sessions:
        raise SessionFormatError(f"{path}: empty session log")
    return sessions


def write_sessions(sessions: Iterable, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in sessions:
            line = " ".join(_as_items(s))
            if isinstance(s, Session) and s.add_to_cart is not None:
                line += "\t1" if s.add_to_cart else "\t0"
            fh.write(line + "\n")


def filter_by_length(sessions: Sequence, min_len: int = MIN_LEN, max_len: int = MAX_LEN) -> list:
    return [s for s in sessions if min_len <= len(_as_items(s)) <= max_len]


@dataclass
class Vocabulary:
    """Product-ID to index map with PAD=0, MASK=1, UNK=2 reserved."""

    itos: list = field(default_factory=lambda: list(SPECIAL_TOKENS))

    def __post_init__(self):
        if tuple(self.itos[:N_SPECIAL]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the special tokens")
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi and self.stoi[token] >= N_SPECIAL

    @property
    def n_products(self) -> int:
        return len(self.itos) - N_SPECIAL

    def index(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def encode(self, items) -> np.ndarray:
        return np.array([self.stoi.get(t, UNK) for t in items], dtype=np.int64)

    def decode(self, ids) -> list:
        return [self.itos[int(i)] for i in ids]

    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()


def build_vocab(sessions: Sequence) -> Vocabulary:
    """Vocabulary with products indexed by order of first occurrence."""
    if not sessions:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    itos = list(SPECIAL_TOKENS)
    seen = set()
    for s in sessions:
        for it in _as_items(s):
            if it not in seen:
                seen.add(it)
                itos.append(it)
    return Vocabulary(itos)


def duplicate(sessions: Sequence, k: int = 5) -> list:
    """Repeat the corpus ``k`` times; each copy is masked independently later."""
    if k < 1:
        raise ValueError(f"duplication factor must be >= 1, got {k}")
    return [s for _ in range(k) for s in sessions]


@dataclass
class MaskedBatch:
    input_ids: np.ndarray
    target_ids: np.ndarray
    mask_flags: np.ndarray
    pad_flags: np.ndarray

    def __len__(self):
        return self.input_ids.shape[0]

    def rows(self, idx) -> "MaskedBatch":
        """Sub-batch of rows ``idx``, trimmed to the longest selected row."""
        width = int((~self.pad_flags[idx]).sum(axis=1).max())
        return MaskedBatch(
            self.input_ids[idx, :width],
            self.target_ids[idx, :width],
            self.mask_flags[idx, :width],
            self.pad_flags[idx, :width],
        )


def pad_ids(rows: Sequence[np.ndarray], max_len: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id arrays; returns ``(ids, pad_flags)``."""
    width = max(len(r) for r in rows) if max_len is None else max_len
    ids = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        if len(r) > width:
            raise ValueError(f"row {i} has length {len(r)} > max_len {width}")
        ids[i, : len(r)] = r
    return ids, ids == PAD


def mask_batch(
    rows: Sequence,
    m: float,
    rng: np.random.Generator,
    max_len: int = MAX_LEN,
    random_replace: bool = False,
    vocab_size: int | None = None,
) -> MaskedBatch:
    """Select each non-pad position with probability ``m`` for masking.

    ``rows`` are integer id sequences. A row that draws no selection is
    redrawn until it has at least one. With ``random_replace`` the BERT
    80/10/10 policy is used (MASK / random product / unchanged) instead of
    pure MASK substitution.
    """
    if not 0.0 < m < 1.0:
        raise ValueError(f"masking probability must be in (0, 1), got {m}")
    if random_replace and vocab_size is None:
        raise ValueError("random_replace needs vocab_size")
    for i, r in enumerate(rows):
        if len(r) > max_len:
            raise ValueError(f"row {i} has length {len(r)} > max_len {max_len}")
        if len(r) == 0:
            raise ValueError(f"row {i} is empty")
    targets, pad = pad_ids([np.asarray(r) for r in rows])
    live = ~pad
    flags = (rng.random(targets.shape) < m) & live
    empty = ~flags.any(axis=1)
    while empty.any():
        redraw = (rng.random((int(empty.sum()), targets.shape[1])) < m) & live[empty]
        flags[empty] = redraw
        empty = ~flags.any(axis=1)
    inputs = targets.copy()
    if random_replace:
        u = rng.random(targets.shape)
        to_mask = flags & (u < 0.8)
        to_rand = flags & (u >= 0.8) & (u < 0.9)
        inputs[to_mask] = MASK
        inputs[to_rand] = rng.integers(N_SPECIAL, vocab_size, size=int(to_rand.sum()))
    else:
        inputs[flags] = MASK
    return MaskedBatch(inputs, targets, flags, pad)


@dataclass
class CorpusSplit:
    train: list
    validation: list
    test: list
    seed: int
    ratios: tuple = (0.8, 0.1, 0.1)


def split(sessions: Sequence, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> CorpusSplit:
    """Random train/validation/test split, reproducible from ``seed``."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    if ratios[0] == 0:
        raise ValueError("training ratio must be positive")
    n = len(sessions)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_val = min(n_val, n - n_train)
    parts = np.split(perm, [n_train, n_train + n_val])
    return CorpusSplit(
        *[[sessions[i] for i in sorted(p)] for p in parts], seed=seed, ratios=ratios
    )
