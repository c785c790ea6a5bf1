"""Synthetic catalog and session generator.

Sessions follow a latent-type Markov process: the first item is uniform over
the catalog; each following item stays within the current item's type with
probability ``stickiness`` (drawn from a sparse per-type transition matrix),
otherwise it jumps uniformly over the whole catalog. Sessions that contain a
trigger product end in add-to-cart with ``trigger_prob``, the rest with
``base_rate``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .session_data import MAX_LEN, MIN_LEN, Session


@dataclass
class Catalog:
    product_ids: list
    product_types: list

    def __post_init__(self):
        if len(self.product_ids) != len(self.product_types):
            raise ValueError("product_ids and product_types differ in length")
        if len(set(self.product_ids)) != len(self.product_ids):
            raise ValueError("duplicate product ids in catalog")
        self.type_of = dict(zip(self.product_ids, self.product_types))

    def __len__(self):
        return len(self.product_ids)

    @property
    def types(self) -> list:
        return sorted(set(self.product_types))

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for pid, t in zip(self.product_ids, self.product_types):
                fh.write(f"{pid}\t{t}\n")

    @classmethod
    def read(cls, path) -> "Catalog":
        ids, types = [], []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 2 or not all(parts):
                    raise ValueError(f"{path}:{lineno}: expected '<product_id>\\t<type>'")
                ids.append(parts[0])
                types.append(parts[1])
        return cls(ids, types)


def generate_catalog(n_products: int, n_types: int, rng=None) -> Catalog:
    """Shuffle products, then deal them round-robin into ``n_types`` types."""
    if n_types < 1:
        raise ValueError("need at least one product type")
    if n_types > n_products:
        raise ValueError(f"n_types ({n_types}) exceeds n_products ({n_products})")
    rng = rng if rng is not None else np.random.default_rng(0)
    width = len(str(n_products - 1))
    twidth = len(str(n_types - 1))
    ids = [f"p{i:0{width}d}" for i in range(n_products)]
    order = rng.permutation(n_products)
    types = [""] * n_products
    for rank, idx in enumerate(order):
        types[idx] = f"t{rank % n_types:0{twidth}d}"
    return Catalog(ids, types)


def geometric_length_pmf(p: float, min_len: int = MIN_LEN, max_len: int = MAX_LEN) -> np.ndarray:
    """``min_len + Geometric(p)`` truncated to ``[min_len, max_len]``.

    p=0.26 gives median 5 and 75th percentile 7 for the default bounds.
    """
    k = np.arange(max_len - min_len + 1)
    pmf = p * (1 - p) ** k
    return pmf / pmf.sum()


@dataclass
class GenParams:
    n_sessions: int = 20_000
    length_p: float = 0.26
    min_len: int = MIN_LEN
    max_len: int = MAX_LEN
    stickiness: float = 0.9
    markov_concentration: float = 0.05
    n_triggers: int = 0
    trigger_prob: float = 1.0
    base_rate: float = 0.0
    trigger_products: list = field(default_factory=list)
    # restrict randomly picked triggers to one product type (all of it when n_triggers is 0)
    trigger_type: str | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.stickiness <= 1.0:
            raise ValueError("stickiness must be in [0, 1]")
        if self.min_len < MIN_LEN or self.max_len > MAX_LEN or self.min_len > self.max_len:
            raise ValueError(
                f"length support [{self.min_len}, {self.max_len}] outside [{MIN_LEN}, {MAX_LEN}]"
            )
        if not 0.0 < self.length_p <= 1.0:
            raise ValueError("length_p must be in (0, 1]")
        if self.markov_concentration <= 0:
            raise ValueError("markov_concentration must be positive")
        for name in ("trigger_prob", "base_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")


@dataclass
class SyntheticCorpus:
    sessions: list
    catalog: Catalog
    trigger_products: list
    transitions: dict

    def write(self, corpus_path, catalog_path) -> None:
        from .session_data import write_sessions

        write_sessions(self.sessions, corpus_path)
        self.catalog.write(catalog_path)


def _transition_tables(catalog: Catalog, concentration: float, rng) -> dict:
    """Per type, a row-stochastic matrix over that type's members (cumulative)."""
    tables = {}
    for t in catalog.types:
        members = np.array([i for i, pt in enumerate(catalog.product_types) if pt == t])
        rows = rng.dirichlet(np.full(len(members), concentration), size=len(members))
        tables[t] = (members, np.cumsum(rows, axis=1))
    return tables


def generate_sessions(catalog: Catalog, params: GenParams) -> SyntheticCorpus:
    """Generate a labeled corpus; session ``i`` uses RNG stream ``(seed, i)``."""
    root = np.random.default_rng([params.seed, 0])
    tables = _transition_tables(catalog, params.markov_concentration, root)
    if params.trigger_products:
        triggers = list(params.trigger_products)
        unknown = set(triggers) - set(catalog.product_ids)
        if unknown:
            raise ValueError(f"trigger products not in catalog: {sorted(unknown)[:5]}")
    elif params.trigger_type is not None:
        pool = [i for i, t in enumerate(catalog.product_types) if t == params.trigger_type]
        if not pool:
            raise ValueError(f"trigger type {params.trigger_type!r} not in catalog")
        if params.n_triggers > len(pool):
            raise ValueError(f"type {params.trigger_type!r} has only {len(pool)} products")
        if params.n_triggers:
            pool = sorted(root.choice(pool, size=params.n_triggers, replace=False).tolist())
        triggers = [catalog.product_ids[i] for i in pool]
    elif params.n_triggers:
        picks = root.choice(len(catalog), size=params.n_triggers, replace=False)
        triggers = [catalog.product_ids[i] for i in sorted(picks)]
    else:
        triggers = []
    trig_idx = {catalog.product_ids.index(t) for t in triggers}
    pmf = geometric_length_pmf(params.length_p, params.min_len, params.max_len)
    lengths = np.arange(params.min_len, params.max_len + 1)
    item_type = [catalog.product_types[i] for i in range(len(catalog))]
    pos_in_type = {}
    for t, (members, _) in tables.items():
        for j, m in enumerate(members):
            pos_in_type[int(m)] = j
    n = len(catalog)
    sessions = []
    for s in range(params.n_sessions):
        rng = np.random.default_rng([params.seed, 1, s])
        length = int(rng.choice(lengths, p=pmf))
        u = rng.random((length, 2))
        cur = int(rng.integers(n))
        seq = [cur]
        for step in range(1, length):
            if u[step, 0] < params.stickiness:
                members, cum = tables[item_type[cur]]
                row = cum[pos_in_type[cur]]
                j = min(int(np.searchsorted(row, u[step, 1] * row[-1], side="right")), len(row) - 1)
                cur = int(members[j])
            else:
                cur = int(rng.integers(n))
            seq.append(cur)
        has_trigger = any(i in trig_idx for i in seq)
        p_pos = params.trigger_prob if has_trigger else params.base_rate
        label = bool(rng.random() < p_pos)
        sessions.append(Session([catalog.product_ids[i] for i in seq], label, session_id=str(s)))
    return SyntheticCorpus(sessions, catalog, triggers, tables)


def write_corpus(corpus: SyntheticCorpus, out_dir, prefix: str = "") -> tuple[str, str]:
    corpus_path = os.path.join(out_dir, f"{prefix}sessions.txt")
    catalog_path = os.path.join(out_dir, f"{prefix}catalog.tsv")
    corpus.write(corpus_path, catalog_path)
    return corpus_path, catalog_path
