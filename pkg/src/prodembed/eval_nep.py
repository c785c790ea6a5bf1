"""Next Event Prediction: hide the last interaction, rank candidates, score.

Both evaluators draw their cases through :func:`sample_cases` with the same
seed, so ProdBERT and prod2vec are always scored on identical cases.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .session_data import Session


@dataclass(frozen=True)
class NepCase:
    prefix: tuple
    truth: str

    def __post_init__(self):
        if len(self.prefix) < 2:
            raise ValueError("NEP prefix must contain at least 2 items")


@dataclass
class EvalReport:
    model: str
    config_hash: str
    metric: str
    k: int
    scores: list
    seed: int
    hit_rates: list = field(default_factory=list)
    oov_truth: int = 0
    empty_query: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return len(self.scores)

    @property
    def mean(self) -> float:
        return float(np.mean(np.asarray(self.scores, dtype=np.float64))) if self.scores else 0.0

    @property
    def hit_rate(self) -> float:
        return float(np.mean(self.hit_rates)) if self.hit_rates else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(mean=self.mean, count=self.count, hit_rate=self.hit_rate)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def summary_row(self) -> dict:
        return {
            "model": self.model,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "metric": f"{self.metric}@{self.k}",
            "mean": f"{self.mean:.4f}",
            f"HR@{self.k}": f"{self.hit_rate:.4f}",
            "count": self.count,
            "oov_truth": self.oov_truth,
        }

    def to_text(self) -> str:
        return format_table([self.summary_row()])


def format_table(rows: Sequence[dict]) -> str:
    """Aligned-column text table; columns follow the first row's keys."""
    if not rows:
        return ""
    cols = list(rows[0])
    widths = {c: max(len(str(c)), *(len(str(r.get(c, ""))) for r in rows)) for c in cols}
    lines = ["  ".join(str(c).ljust(widths[c]) for c in cols)]
    lines.append("  ".join("-" * widths[c] for c in cols))
    for r in rows:
        lines.append("  ".join(str(r.get(c, "")).ljust(widths[c]) for c in cols))
    return "\n".join(lines) + "\n"


def _truth_rank(ranked: Sequence, truth) -> int | None:
    if len(ranked) == 0:
        raise ValueError("ranked list is empty")
    for i, r in enumerate(ranked):
        if r == truth:
            return i + 1
    return None


def ndcg_at_k(ranked: Sequence, truth, k: int) -> float:
    """nDCG@k with a single relevant item: ``1/log2(rank+1)`` if rank <= k."""
    if k < 1:
        raise ValueError("K must be >= 1")
    r = _truth_rank(ranked, truth)
    if r is None or r > k:
        return 0.0
    return 1.0 / math.log2(r + 1)


def hit_rate_at_k(ranked: Sequence, truth, k: int) -> int:
    if k < 1:
        raise ValueError("K must be >= 1")
    r = _truth_rank(ranked, truth)
    return int(r is not None and r <= k)


def sample_cases(test_sessions: Sequence, n_cases: int | None = None, seed: int = 0) -> list[NepCase]:
    """Sample ``n_cases`` sessions without replacement and split off their last item.

    ``n_cases`` defaults to ``min(10_000, len(test_sessions))``.
    """
    items = [s.items if isinstance(s, Session) else tuple(s) for s in test_sessions]
    items = [it for it in items if len(it) >= 3]
    if n_cases is None:
        n_cases = min(10_000, len(items))
    if n_cases > len(items):
        raise ValueError(f"requested {n_cases} cases but only {len(items)} eligible test sessions")
    pick = np.sort(np.random.default_rng(seed).choice(len(items), size=n_cases, replace=False))
    return [NepCase(tuple(items[i][:-1]), items[i][-1]) for i in pick]


def evaluate_ranker(
    rank_fn: Callable[[list[NepCase], int], list],
    cases: list[NepCase],
    k: int = 10,
    *,
    name: str = "ranker",
    config_hash: str = "",
    seed: int = 0,
    known: Callable[[str], bool] | None = None,
) -> EvalReport:
    """Score a batch ranker on ``cases``.

    ``rank_fn(cases, k)`` returns one ranked product-ID list (or None when
    no query can be formed) per case. Out-of-vocabulary truths score 0 and
    are tallied in the report.
    """
    if k < 1:
        raise ValueError("K must be >= 1")
    ranked = rank_fn(cases, k)
    report = EvalReport(name, config_hash, "nDCG", k, [], seed)
    for case, r in zip(cases, ranked):
        if known is not None and not known(case.truth):
            report.oov_truth += 1
            report.scores.append(0.0)
            report.hit_rates.append(0)
            continue
        if r is None:
            report.empty_query += 1
            report.scores.append(0.0)
            report.hit_rates.append(0)
            continue
        report.scores.append(ndcg_at_k(r, case.truth, k))
        report.hit_rates.append(hit_rate_at_k(r, case.truth, k))
    return report


def eval_prodbert(model, test_sessions=None, k: int = 10, n_cases: int | None = None,
                  seed: int = 0, cases: list[NepCase] | None = None) -> EvalReport:
    """Replace each session's last item with MASK and rank the vocabulary there."""
    from .prodbert import masked_logits, rank_products

    if cases is None:
        cases = sample_cases(test_sessions, n_cases, seed)

    def rank(cs, kk):
        rows = [model.vocab.encode(c.prefix + (c.truth,)) for c in cs]
        logits = masked_logits(model, rows, [len(r) - 1 for r in rows])
        return [model.vocab.decode(r) for r in rank_products(logits, kk)]

    return evaluate_ranker(rank, cases, k, name="prodbert",
                           config_hash=model.metadata.get("config_hash", ""), seed=seed,
                           known=lambda t: t in model.vocab)


def eval_prod2vec(model, test_sessions=None, k: int = 10, n_cases: int | None = None,
                  seed: int = 0, cases: list[NepCase] | None = None) -> EvalReport:
    """Average the prefix embeddings and rank products by cosine k-NN."""
    from .prod2vec import knn_rank, session_vector

    if cases is None:
        cases = sample_cases(test_sessions, n_cases, seed)

    def rank(cs, kk):
        queries, slots = [], []
        for i, c in enumerate(cs):
            known = [it for it in c.prefix if it in model.vocab]
            if known:
                queries.append(session_vector(model, known))
                slots.append(i)
        out = [None] * len(cs)
        if queries:
            for i, r in zip(slots, knn_rank(model, np.array(queries), kk)):
                out[i] = model.vocab.decode(r)
        return out

    return evaluate_ranker(rank, cases, k, name="prod2vec",
                           config_hash=model.metadata.get("config_hash", ""), seed=seed,
                           known=lambda t: t in model.vocab)


__all__ = [
    "EvalReport",
    "NepCase",
    "eval_prod2vec",
    "eval_prodbert",
    "evaluate_ranker",
    "format_table",
    "hit_rate_at_k",
    "ndcg_at_k",
    "sample_cases",
]
