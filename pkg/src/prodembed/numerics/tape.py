"""Minimal reverse-mode differentiation over numpy arrays.

A :class:`GradTape` records every primitive applied to tracked values in
execution order; :meth:`GradTape.gradient` replays that record backwards.
Only the primitives the models in this package need are provided.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class Var:
    """An array value, optionally tracked by a tape."""

    __slots__ = ("value", "tape")
    __array_priority__ = 100

    def __init__(self, value, tape: "GradTape | None" = None):
        self.value = np.asarray(value)
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        tracked = "tracked" if self.tape is not None else "const"
        return f"Var(shape={self.shape}, {tracked})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise TypeError("division by a tracked value is not supported")
        return mul(self, 1.0 / np.asarray(other, dtype=self.dtype))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class GradTape:
    """Ordered record of primitive operations for one scalar objective.

    A tape is single-threaded and meant to be used once: build it, run the
    forward pass through the ops in this module, then call :meth:`gradient`.
    """

    def __init__(self):
        self._records: list[tuple[Var, tuple, Callable]] = []

    def __len__(self):
        return len(self._records)

    def watch(self, value) -> Var:
        """Register ``value`` as a differentiable leaf."""
        return Var(value, self)

    def record(self, out, parents: Sequence, backward: Callable) -> Var:
        tapes = {p.tape for p in parents if isinstance(p, Var) and p.tape is not None}
        if not tapes:
            return Var(out)
        if len(tapes) > 1 or self not in tapes:
            raise ValueError("operands belong to different tapes")
        var = Var(out, self)
        self._records.append((var, tuple(parents), backward))
        return var

    def gradient(self, loss: Var, sources: Sequence[Var]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` w.r.t. each of ``sources``.

        Sources that do not influence the loss receive zero arrays.
        """
        if loss.value.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        for out, parents, backward in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, backward(g)):
                if pg is None or not isinstance(parent, Var) or parent.tape is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return [
            grads.get(id(s), np.zeros_like(s.value)).reshape(s.shape) for s in sources
        ]


def _tape_of(*xs) -> GradTape | None:
    for x in xs:
        if isinstance(x, Var) and x.tape is not None:
            return x.tape
    return None


def _val(x):
    if isinstance(x, Var):
        return x.value
    if isinstance(x, (int, float)):
        return x  # python scalars stay weakly typed: no float32 -> float64 promotion
    return np.asarray(x)


def _emit(out, parents, backward):
    tape = _tape_of(*parents)
    if tape is None:
        return Var(out)
    return tape.record(out, parents, backward)


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ----------------------------------------------------------


def _tracked(x) -> bool:
    return isinstance(x, Var) and x.tape is not None


def add(a, b) -> Var:
    av, bv = _val(a), _val(b)
    ta, tb = _tracked(a), _tracked(b)
    return _emit(
        av + bv,
        (a, b),
        lambda g: (
            unbroadcast(g, av.shape) if ta else None,
            unbroadcast(g, bv.shape) if tb else None,
        ),
    )


def sub(a, b) -> Var:
    av, bv = _val(a), _val(b)
    ta, tb = _tracked(a), _tracked(b)
    return _emit(
        av - bv,
        (a, b),
        lambda g: (
            unbroadcast(g, av.shape) if ta else None,
            -unbroadcast(g, bv.shape) if tb else None,
        ),
    )


def mul(a, b) -> Var:
    av, bv = _val(a), _val(b)
    ta, tb = _tracked(a), _tracked(b)
    return _emit(
        av * bv,
        (a, b),
        lambda g: (
            unbroadcast(g * bv, av.shape) if ta else None,
            unbroadcast(g * av, bv.shape) if tb else None,
        ),
    )


def tanh(x) -> Var:
    y = np.tanh(_val(x))
    return _emit(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> Var:
    y = _sigmoid(_val(x))
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x) -> Var:
    xv = _val(x)
    return _emit(np.maximum(xv, 0), (x,), lambda g: (g * (xv > 0),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x) -> Var:
    """Tanh approximation of the Gaussian error linear unit."""
    xv = _val(x)
    c = xv.dtype.type(_GELU_C)
    inner = c * (xv + 0.044715 * (xv * xv * xv))
    t = np.tanh(inner)
    y = 0.5 * xv * (1.0 + t)

    def backward(g):
        dinner = c * (1.0 + 3 * 0.044715 * xv * xv)
        return (g * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * dinner),)

    return _emit(y, (x,), backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# -- shape ----------------------------------------------------------------


def reshape(x, shape) -> Var:
    xv = _val(x)
    return _emit(xv.reshape(shape), (x,), lambda g: (g.reshape(xv.shape),))


def transpose(x, axes) -> Var:
    xv = _val(x)
    axes = tuple(axes) if axes else tuple(reversed(range(xv.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit(xv.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def getitem(x, idx) -> Var:
    xv = _val(x)
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros_like(xv)
        if basic:
            full[idx] = g  # basic indexing never repeats an element
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _emit(xv[idx], (x,), backward)


def take_rows(table, ids: np.ndarray) -> Var:
    """Embedding lookup: ``table[ids]`` with scatter-add backward."""
    tv = _val(table)
    ids = np.asarray(ids)

    def backward(g):
        flat = g.reshape(-1, tv.shape[1])
        full = np.zeros_like(tv)
        np.add.at(full, ids.ravel(), flat)
        return (full,)

    return _emit(tv[ids], (table,), backward)


def concat(xs: Sequence, axis: int = -1) -> Var:
    vals = [_val(x) for x in xs]
    ax = axis % vals[0].ndim
    splits = np.cumsum([v.shape[ax] for v in vals])[:-1]
    return _emit(
        np.concatenate(vals, axis=ax),
        tuple(xs),
        lambda g: tuple(np.split(g, splits, axis=ax)),
    )


def stack(xs: Sequence, axis: int = 0) -> Var:
    vals = [_val(x) for x in xs]
    out = np.stack(vals, axis=axis)
    ax = axis % out.ndim
    return _emit(
        out,
        tuple(xs),
        lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(vals))),
    )


# -- reductions and products ----------------------------------------------


def sum_(x, axis=None, keepdims=False) -> Var:
    xv = _val(x)
    out = xv.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xv.shape).copy(),)

    return _emit(out, (x,), backward)


def mean(x, axis=None, keepdims=False) -> Var:
    xv = _val(x)
    n = xv.size if axis is None else np.prod([xv.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), xv.dtype.type(1.0 / n))


def matmul(a, b) -> Var:
    av, bv = _val(a), _val(b)

    ta, tb = _tracked(a), _tracked(b)

    def backward(g):
        ga = gb = None
        if bv.ndim == 1:
            # [..., n] @ [n] -> [...]
            if ta:
                ga = np.multiply.outer(g, bv)
            if tb:
                gb = np.tensordot(g, av, axes=g.ndim) if g.ndim else g * av
        elif av.ndim == 1:
            if ta:
                ga = g @ bv.T
            if tb:
                gb = np.outer(av, g)
        elif bv.ndim == 2 and av.ndim > 2:
            if ta:
                ga = g @ bv.T
            if tb:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            if ta:
                ga = unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
            if tb:
                gb = unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _emit(av @ bv, (a, b), backward)


# -- fused kernels ----------------------------------------------------------


def masked_softmax(x, key_mask: np.ndarray | None = None, axis: int = -1) -> Var:
    """Softmax along ``axis``; entries where ``key_mask`` is False get 0.

    ``key_mask`` broadcasts against ``x``. Masking is the additive -inf form,
    so excluded keys receive exactly zero weight.
    """
    xv = _val(x)
    if key_mask is not None:
        xv = np.where(key_mask, xv, -np.inf)
    shift = xv.max(axis=axis, keepdims=True)
    e = np.exp(xv - shift)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit(y, (x,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Var:
    xv, gv, bv = _val(x), _val(gamma), _val(beta)
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    d = xv.shape[-1]

    def backward(g):
        gxhat = g * gv
        gx = rstd * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True) / d
        )
        red = tuple(range(xv.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _emit(xhat * gv + bv, (x, gamma, beta), backward)


def dropout(x, rate: float, rng: np.random.Generator | None) -> Var:
    """Inverted dropout; identity when ``rate`` is 0 or ``rng`` is None."""
    if rate <= 0.0 or rng is None:
        return x if isinstance(x, Var) else Var(x)
    xv = _val(x)
    rdt = np.float32 if xv.dtype == np.float32 else np.float64
    keep = (rng.random(xv.shape, dtype=rdt) >= rate).astype(xv.dtype) / xv.dtype.type(1.0 - rate)
    return mul(x, keep)


def cross_entropy_rows(logits, targets: np.ndarray, weights: np.ndarray) -> Var:
    """Weighted sum over rows of ``-log softmax(logits)[target]``.

    Rows with weight 0 contribute exactly zero to value and gradient.
    """
    lv = _val(logits)
    shift = lv.max(axis=-1, keepdims=True)
    z = lv - shift
    lse = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(lv.shape[0])
    nll = lse - z[rows, targets]
    w = np.asarray(weights, dtype=lv.dtype)
    active = w != 0
    loss = np.dot(w[active].astype(np.float64), nll[active].astype(np.float64))

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        p *= w[:, None] * g
        p[~active] = 0.0
        return (p,)

    return _emit(np.asarray(loss, dtype=lv.dtype), (logits,), backward)


def bce_with_logits(logits, labels: np.ndarray) -> Var:
    """Mean binary cross-entropy computed from logits."""
    zv = _val(logits)
    y = np.asarray(labels, dtype=zv.dtype).reshape(zv.shape)
    # log(1 + e^z) - y z, written to avoid overflow
    per = np.maximum(zv, 0) - zv * y + np.log1p(np.exp(-np.abs(zv)))
    n = zv.size

    def backward(g):
        return (g * (_sigmoid(zv) - y) / n,)

    return _emit(np.asarray(per.astype(np.float64).mean(), dtype=zv.dtype), (logits,), backward)
