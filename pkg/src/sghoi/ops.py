"""Reverse-mode autodiff over numpy arrays, sized for desk-scale scene graphs.

Every primitive accepts a mix of plain ndarrays and :class:`Var` nodes and
returns the same kind: if no input is a Var the computation runs as ordinary
numpy (bit-identical to the traced path), otherwise a graph node is recorded.
Model code is therefore written once and serves both inference and training.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np


class Var:
    """Node in a dynamically built computation graph.

    ``_parents`` holds ``(input_var, pull)`` pairs where ``pull`` maps the
    output gradient to this input's gradient contribution.  ``_grad_owned``
    tracks whether ``grad`` is an exclusively owned buffer that accumulation
    may mutate in place.
    """

    __slots__ = ("value", "grad", "_parents", "_grad_owned")

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._grad_owned = False


def is_var(x) -> bool:
    return isinstance(x, Var)


def value_of(x):
    """Underlying ndarray (or scalar) of a Var or passthrough for ndarrays."""
    return x.value if isinstance(x, Var) else x


def _any_var(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    shape = tuple(shape)
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _node(value, parents):
    return Var(value, parents=tuple(parents))


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    if not _any_var(a, b):
        return out
    parents = []
    if is_var(a):
        parents.append((a, lambda g, s=np.shape(av): _unbroadcast(g, s)))
    if is_var(b):
        parents.append((b, lambda g, s=np.shape(bv): _unbroadcast(g, s)))
    return _node(out, parents)


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    if not _any_var(a, b):
        return out
    parents = []
    if is_var(a):
        parents.append((a, lambda g, s=np.shape(av): _unbroadcast(g, s)))
    if is_var(b):
        parents.append((b, lambda g, s=np.shape(bv): _unbroadcast(-g, s)))
    return _node(out, parents)


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    if not _any_var(a, b):
        return out
    parents = []
    if is_var(a):
        parents.append((a, lambda g, o=bv, s=np.shape(av): _unbroadcast(g * o, s)))
    if is_var(b):
        parents.append((b, lambda g, o=av, s=np.shape(bv): _unbroadcast(g * o, s)))
    return _node(out, parents)


def scale(x, c: float):
    xv = value_of(x)
    out = xv * c
    if not is_var(x):
        return out
    return _node(out, [(x, lambda g: g * c)])


def matmul(a, b):
    """Matrix/vector product with 1-D and 2-D operands (numpy @ semantics)."""
    av, bv = value_of(a), value_of(b)
    out = av @ bv
    if not _any_var(a, b):
        return out

    def pull_a(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv
        if av.ndim == 1:  # (d,) @ (d,k) -> (k,)
            return bv @ g
        if bv.ndim == 1:  # (n,d) @ (d,) -> (n,)
            return np.outer(g, bv)
        return g @ bv.T

    def pull_b(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * av
        if av.ndim == 1:
            return np.outer(av, g)
        if bv.ndim == 1:
            return av.T @ g
        return av.T @ g

    parents = []
    if is_var(a):
        parents.append((a, pull_a))
    if is_var(b):
        parents.append((b, pull_b))
    return _node(out, parents)


def transpose(x):
    xv = value_of(x)
    out = xv.T
    if not is_var(x):
        return out
    return _node(out, [(x, lambda g: g.T)])


def concat(parts: Sequence, axis: int = 0):
    values = [value_of(p) for p in parts]
    out = np.concatenate(values, axis=axis)
    if not any(is_var(p) for p in parts):
        return out
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)
    parents = []
    for i, p in enumerate(parts):
        if not is_var(p):
            continue
        lo, hi = offsets[i], offsets[i + 1]

        def pull(g, lo=lo, hi=hi):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        parents.append((p, pull))
    return _node(out, parents)


def stack_rows(rows: Sequence):
    """Stack 1-D vectors into a matrix, one row each."""
    values = [value_of(r) for r in rows]
    out = np.stack(values, axis=0)
    if not any(is_var(r) for r in rows):
        return out
    parents = [(r, lambda g, i=i: g[i]) for i, r in enumerate(rows) if is_var(r)]
    return _node(out, parents)


def sum_all(x):
    xv = value_of(x)
    out = xv.sum()
    if not is_var(x):
        return out
    return _node(out, [(x, lambda g: np.broadcast_to(g, xv.shape))])


def sum_axis0(x):
    xv = value_of(x)
    out = xv.sum(axis=0)
    if not is_var(x):
        return out
    return _node(out, [(x, lambda g: np.broadcast_to(g, xv.shape))])


def mean_all(x):
    size = value_of(x).size
    return scale(sum_all(x), 1.0 / size)


def sigmoid(x):
    xv = value_of(x)
    out = np.empty_like(np.asarray(xv, dtype=np.float64))
    pos = xv >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    ex = np.exp(xv[~pos])
    out[~pos] = ex / (1.0 + ex)
    if not is_var(x):
        return out
    return _node(out, [(x, lambda g: g * out * (1.0 - out))])


def tanh(x):
    xv = value_of(x)
    out = np.tanh(xv)
    if not is_var(x):
        return out
    return _node(out, [(x, lambda g: g * (1.0 - out * out))])


def log(x):
    xv = value_of(x)
    out = np.log(xv)
    if not is_var(x):
        return out
    return _node(out, [(x, lambda g: g / xv)])


def clip(x, lo: float, hi: float):
    """Clamp with zero gradient outside the open interval (lo, hi)."""
    xv = value_of(x)
    out = np.clip(xv, lo, hi)
    if not is_var(x):
        return out
    mask = (xv > lo) & (xv < hi)
    return _node(out, [(x, lambda g: g * mask)])


def repeat_row(v, k: int):
    """Tile a 1-D vector into a (k, d) matrix."""
    vv = value_of(v)
    out = np.tile(vv, (k, 1))
    if not is_var(v):
        return out
    return _node(out, [(v, lambda g: g.sum(axis=0))])


def slice_rows(x, lo: int, hi: int):
    """Contiguous slice along axis 0 (rows of a matrix, or vector entries)."""
    xv = value_of(x)
    out = xv[lo:hi]
    if not is_var(x):
        return out

    def pull(g):
        full = np.zeros_like(xv)
        full[lo:hi] = g
        return full

    return _node(out, [(x, pull)])


def row(x, i: int):
    """Single row of a matrix as a 1-D vector."""
    xv = value_of(x)
    out = xv[i]
    if not is_var(x):
        return out

    def pull(g):
        full = np.zeros_like(xv)
        full[i] = g
        return full

    return _node(out, [(x, pull)])


def gather_rows(x, idx):
    xv = value_of(x)
    idx = np.asarray(idx, dtype=np.intp)
    out = xv[idx]
    if not is_var(x):
        return out

    def pull(g):
        full = np.zeros_like(xv)
        np.add.at(full, idx, g)
        return full

    return _node(out, [(x, pull)])


def index_add(num_rows: int, idx, rows):
    """Scatter-add row vectors into a fresh (num_rows, d) matrix."""
    rv = value_of(rows)
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((num_rows, rv.shape[1]), dtype=np.float64)
    np.add.at(out, idx, rv)
    if not is_var(rows):
        return out
    return _node(out, [(rows, lambda g: g[idx])])


def reshape(x, shape):
    xv = value_of(x)
    out = xv.reshape(shape)
    if not is_var(x):
        return out
    return _node(out, [(x, lambda g: g.reshape(xv.shape))])


def backward(loss: Var) -> None:
    """Accumulate gradients of a scalar loss into every reachable Var."""
    if not is_var(loss):
        raise TypeError("backward() needs a Var produced by traced ops")
    topo: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.value)
    for node in reversed(topo):
        g = node.grad
        if g is None:
            continue
        for parent, pull in node._parents:
            contribution = pull(g)
            if parent.grad is None:
                # may alias another node's buffer (pass-through pulls): not owned
                parent.grad = contribution
            elif parent._grad_owned:
                parent.grad += contribution
            else:
                parent.grad = parent.grad + contribution
                parent._grad_owned = True
