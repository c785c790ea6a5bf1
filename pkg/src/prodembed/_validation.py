"""Input checks shared by the estimator wrappers."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .session_data import Session


def check_sessions(sessions, *, min_len: int = 1, name: str = "sessions") -> list[tuple]:
    """Coerce ``sessions`` to a list of tuples of product-ID strings."""
    if isinstance(sessions, (str, bytes)) or not hasattr(sessions, "__iter__"):
        raise TypeError(f"{name} must be an iterable of sessions, got {type(sessions).__name__}")
    out = []
    for i, s in enumerate(sessions):
        items = s.items if isinstance(s, Session) else s
        if isinstance(items, (str, bytes)):
            raise TypeError(f"{name}[{i}] is a string; expected a sequence of product IDs")
        items = tuple(str(it) for it in items)
        if len(items) < min_len:
            raise ValueError(f"{name}[{i}] has {len(items)} items; at least {min_len} required")
        out.append(items)
    if not out:
        raise ValueError(f"{name} is empty")
    return out


def check_binary_labels(y: Sequence, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    values = set(np.unique(y).tolist())
    if not values <= {0, 1, True, False}:
        raise ValueError(f"labels must be binary 0/1, got {sorted(values)[:5]}")
    if len(values) < 2:
        raise ValueError("labels contain a single class")
    return y.astype(np.int64)


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_is_fitted(estimator, attribute: str) -> None:
    if getattr(estimator, attribute, None) is None:
        raise RuntimeError(f"{type(estimator).__name__} is not fitted yet; call fit() first")
