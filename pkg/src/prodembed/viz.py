"""Two-dimensional maps of session embeddings.

Session vectors are projected with exact t-SNE and colored by the majority
product type of each session. Exports are a CSV of coordinates and a
self-contained SVG scatter plot.
"""
from __future__ import annotations

import html
import io
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .session_data import Session

logger = logging.getLogger(__name__)

PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)  # fmt: skip


def majority_type(session, catalog) -> str:
    """Most frequent product type in ``session``; ties go to the smallest type name."""
    items = session.items if isinstance(session, Session) else session
    if len(items) == 0:
        raise ValueError("empty session has no majority type")
    unknown = [it for it in items if it not in catalog.type_of]
    if unknown:
        raise KeyError(f"products not in catalog: {unknown[:5]}")
    counts = Counter(catalog.type_of[it] for it in items)
    top = max(counts.values())
    return min(t for t, c in counts.items() if c == top)


# -- t-SNE ----------------------------------------------------------------------


def _sq_distances(X: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", X, X)
    D = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.maximum(D, 0.0, out=D)
    np.fill_diagonal(D, 0.0)
    return D


def _row_entropy(D: np.ndarray, beta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Shannon entropy (nats) of each row's conditional distribution and the rows."""
    logits = -D * beta[:, None]
    np.fill_diagonal(logits, -np.inf)
    logits -= logits.max(axis=1, keepdims=True)
    P = np.exp(logits)
    P /= P.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        H = -np.sum(np.where(P > 0, P * np.log(P), 0.0), axis=1)
    return H, P


def conditional_affinities(X: np.ndarray, perplexity: float, tol: float = 1e-10,
                           max_iter: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise ``p_{j|i}`` with each row's precision found by bisection.

    Returns ``(P_cond, perplexities)``. The search runs on ``log(beta)`` for all
    rows at once until every row's entropy is within ``tol`` nats of
    ``log(perplexity)``.
    """
    D = _sq_distances(np.asarray(X, dtype=np.float64))
    n = len(D)
    target = np.log(perplexity)
    # scale-free brackets for log(beta) around the typical squared distance
    scale = np.median(D[~np.eye(n, dtype=bool)]) if n > 1 else 1.0
    scale = scale if scale > 0 else 1.0
    lo = np.full(n, np.log(1e-12 / scale))
    hi = np.full(n, np.log(1e12 / scale))
    mid = np.zeros(n)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        H, _ = _row_entropy(D, np.exp(mid))
        # entropy decreases as beta grows
        too_flat = H > target
        lo = np.where(too_flat, mid, lo)
        hi = np.where(too_flat, hi, mid)
        if np.all(np.abs(H - target) < tol):
            break
    H, P = _row_entropy(D, np.exp(mid))
    return P, np.exp(H)


def joint_affinities(P_cond: np.ndarray) -> np.ndarray:
    P = P_cond + P_cond.T
    P /= P.sum()
    return P


@dataclass
class TsneResult:
    coords: np.ndarray
    kl: dict
    perplexities: np.ndarray
    P: np.ndarray = field(repr=False)

    @property
    def final_kl(self) -> float:
        return self.kl[max(self.kl)]


def _low_dim_kernel(Y: np.ndarray) -> np.ndarray:
    """Student-t kernel ``1 / (1 + |y_i - y_j|^2)`` with a zero diagonal.

    Computed per coordinate, without BLAS, so that swapping or negating the
    axes gives bitwise identical results.
    """
    d = np.zeros((len(Y), len(Y)))
    for k in range(Y.shape[1]):
        diff = Y[:, k, None] - Y[None, :, k]
        d += diff * diff
    num = 1.0 / (1.0 + d)
    np.fill_diagonal(num, 0.0)
    return num


def _kl(P: np.ndarray, Q: np.ndarray) -> float:
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / np.maximum(Q[mask], 1e-300))))


def tsne(vectors, perplexity: float = 30.0, iterations: int = 1000, rng=None, *,
         init: np.ndarray | None = None, learning_rate: float = 200.0,
         exaggeration: float = 12.0, exaggeration_iters: int = 250,
         momentum: tuple = (0.5, 0.8), adaptive_gains: bool = False,
         kl_every: int = 50) -> TsneResult:
    """Exact t-SNE to two dimensions.

    Early exaggeration multiplies P for the first ``exaggeration_iters``
    steps, during which momentum is ``momentum[0]``. KL(P||Q) is recorded
    every ``kl_every`` iterations, right after exaggeration ends, and at the
    last iteration. ``adaptive_gains`` enables the per-coordinate step gains
    of the reference implementation; they are off by default, which keeps
    the optimization equivariant to rotations of ``init``.

    Without gains nothing damps oscillation, so the step is capped at
    ``(1 + momentum[1]) / (8 max p_ij)``: half the largest step at which the
    stiffest attracting pair still converges under the final momentum. The
    cap only binds for small inputs (a few hundred points or fewer).
    """
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("vectors must be a 2-D array")
    if not np.all(np.isfinite(X)):
        raise ValueError("vectors contain non-finite values")
    n = len(X)
    if n <= 3 * perplexity:
        raise ValueError(f"t-SNE with perplexity {perplexity} needs more than {3 * perplexity:g} points, got {n}")
    rng = rng if rng is not None else np.random.default_rng(0)
    P_cond, perp = conditional_affinities(X, perplexity)
    P = joint_affinities(P_cond)
    lr = min(learning_rate, (1.0 + momentum[1]) / (8.0 * P.max()))
    if lr < learning_rate:
        logger.debug("t-SNE learning rate capped at %.3g for stability", lr)
    Y = np.array(init, dtype=np.float64, copy=True) if init is not None else rng.normal(scale=1e-4, size=(n, 2))
    if Y.shape != (n, 2):
        raise ValueError(f"init must have shape {(n, 2)}")
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    kl = {}
    for it in range(1, iterations + 1):
        exag = exaggeration if it <= exaggeration_iters else 1.0
        mom = momentum[0] if it <= exaggeration_iters else momentum[1]
        num = _low_dim_kernel(Y)
        Q = num / num.sum()
        W = (exag * P - Q) * num
        rows = W.sum(axis=1)
        grad = np.stack([4.0 * (rows * Y[:, k] - W @ Y[:, k]) for k in range(2)], axis=1)
        if adaptive_gains:
            same = np.sign(grad) == np.sign(update)
            gains = np.where(same, gains * 0.8, gains + 0.2)
            np.maximum(gains, 0.01, out=gains)
            update = mom * update - lr * gains * grad
        else:
            update = mom * update - lr * grad
        Y = Y + update
        Y -= Y.mean(axis=0)
        if it % kl_every == 0 or it == exaggeration_iters or it == iterations:
            num = _low_dim_kernel(Y)
            kl[it] = _kl(P, num / num.sum())
            logger.debug("t-SNE iteration %d KL %.5f", it, kl[it])
    if not np.all(np.isfinite(Y)):
        raise FloatingPointError("t-SNE diverged; lower the learning rate")
    return TsneResult(Y, kl, perp, P)


# -- projections and export ------------------------------------------------------


@dataclass
class Projection2D:
    coords: np.ndarray
    types: list
    session_ids: list
    source: str = ""
    kl: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        if not (len(self.coords) == len(self.types) == len(self.session_ids)):
            raise ValueError("coords, types and session_ids must have equal length")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("projection coordinates must be finite")

    def __len__(self):
        return len(self.coords)


def session_vectors(model, sessions: Sequence) -> np.ndarray:
    """enc_0 mean-pooled vectors for ProdBERT; mean item vectors for prod2vec."""
    from .prod2vec import Prod2vecModel, session_vector
    from .prodbert import ProdBertModel, encode_sessions

    if isinstance(model, ProdBertModel):
        return encode_sessions(model, sessions, "enc_0")
    if isinstance(model, Prod2vecModel):
        return np.array([session_vector(model, s.items if isinstance(s, Session) else s) for s in sessions])
    raise TypeError(f"unsupported model type {type(model).__name__}")


def project_sessions(model, sessions: Sequence, catalog, *, perplexity: float = 30.0,
                     iterations: int = 1000, seed: int = 0, source: str = "") -> Projection2D:
    vecs = session_vectors(model, sessions)
    res = tsne(vecs, perplexity, iterations, np.random.default_rng([seed, 8]))
    types = [majority_type(s, catalog) for s in sessions]
    ids = [(s.session_id if isinstance(s, Session) and s.session_id is not None else str(i))
           for i, s in enumerate(sessions)]
    return Projection2D(res.coords, types, ids, source or type(model).__name__, res.kl)


def _csv_text(proj: Projection2D) -> str:
    buf = io.StringIO()
    buf.write("x,y,type,session_id\n")
    for (x, y), t, sid in zip(proj.coords, proj.types, proj.session_ids):
        buf.write(f"{x:.6f},{y:.6f},{t},{sid}\n")
    return buf.getvalue()


def _svg_text(proj: Projection2D, size: int = 640, margin: int = 20, legend_w: int = 160) -> str:
    types = sorted(set(proj.types))
    color = {t: PALETTE[i % len(PALETTE)] for i, t in enumerate(types)}
    lo, hi = proj.coords.min(axis=0), proj.coords.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    inner = size - 2 * margin
    pts = margin + (proj.coords - lo) / span * inner
    width = size + legend_w
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{size}" '
        f'viewBox="0 0 {width} {size}">',
        f'<rect x="0" y="0" width="{width}" height="{size}" style="fill:#ffffff"/>',
    ]
    if proj.source:
        out.append(f'<title>{html.escape(proj.source)}</title>')
    for (x, y), t in zip(pts, proj.types):
        # flip y so larger values plot upwards
        out.append(f'<circle cx="{x:.2f}" cy="{size - y:.2f}" r="2.5" '
                   f'style="fill:{color[t]};fill-opacity:0.8"/>')
    out.append('<g class="legend">')
    for i, t in enumerate(types):
        y = margin + 18 * i
        out.append(f'<rect x="{size + 10}" y="{y}" width="10" height="10" style="fill:{color[t]}"/>')
        out.append(f'<text x="{size + 26}" y="{y + 9}" style="font-family:sans-serif;font-size:11px">'
                   f'{html.escape(str(t))}</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def export_plot(proj: Projection2D, path) -> tuple[str, str]:
    """Write ``<path>.csv`` and ``<path>.svg``; returns both paths.

    Nothing is written for an empty projection.
    """
    if len(proj) == 0:
        raise ValueError("cannot export an empty projection")
    stem = os.fspath(path)
    for ext in (".csv", ".svg"):
        if stem.endswith(ext):
            stem = stem[: -len(ext)]
    parent = os.path.dirname(stem) or "."
    if not os.path.isdir(parent) or not os.access(parent, os.W_OK):
        raise OSError(f"cannot write plot files into {parent!r}")
    csv_text, svg_text = _csv_text(proj), _svg_text(proj)
    csv_path, svg_path = stem + ".csv", stem + ".svg"
    with open(csv_path, "w", encoding="utf-8", newline="") as f:
        f.write(csv_text)
    with open(svg_path, "w", encoding="utf-8") as f:
        f.write(svg_text)
    return csv_path, svg_path


__all__ = [
    "Projection2D",
    "TsneResult",
    "conditional_affinities",
    "export_plot",
    "joint_affinities",
    "majority_type",
    "project_sessions",
    "session_vectors",
    "tsne",
]
