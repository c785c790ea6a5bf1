"""Plain numpy kernels plus the tracked MLM loss."""
from __future__ import annotations

import numpy as np

from .tape import Var, _val, cross_entropy_rows


def softmax(logits, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax over ``axis``.

    Raises
    ------
    FloatingPointError
        If any input value is NaN or infinite.
    """
    x = np.asarray(logits)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("softmax input contains non-finite values")
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def masked_cross_entropy(logits, targets, mask_flags) -> Var:
    """Mean of ``-log softmax(logits)[target]`` over masked positions.

    ``logits`` is ``[positions, vocab]`` (a :class:`Var` when gradients are
    wanted). Unmasked positions contribute exactly zero to loss and gradient.
    """
    flags = np.asarray(mask_flags, dtype=bool).ravel()
    n = int(flags.sum())
    if n == 0:
        raise ValueError("masked_cross_entropy needs at least one masked position")
    lv = _val(logits)
    if not np.all(np.isfinite(lv)):
        raise FloatingPointError("logits contain non-finite values")
    targets = np.asarray(targets).ravel()
    weights = flags.astype(lv.dtype) / lv.dtype.type(n)
    return cross_entropy_rows(logits, targets, weights)


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float64):
    """Normal(0, std) samples truncated at two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)
