"""Minimal reverse-mode differentiation over the operations the unrolled network needs.

A :class:`Var` holds a value, an accumulated gradient and a closure that
pushes its gradient to its parents. Calling :func:`backward` on a scalar
output walks the recorded graph (the tape) in reverse topological order.

Feature maps are arrays of shape ``(channels, nx, ny, nz)``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Var:
    __slots__ = ("value", "grad", "parents", "_push", "name")

    def __init__(self, value, parents=(), push=None, name=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self._push = push
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var({self.name or 'anon'}, shape={self.value.shape})"


def leaf(value, name=None) -> Var:
    return Var(np.asarray(value), name=name)


def _accumulate(var: Var, g) -> None:
    if var.grad is None:
        var.grad = np.array(g, dtype=var.value.dtype, copy=True)
    else:
        var.grad += g


def backward(root: Var, seed=None) -> None:
    """Accumulate d(root)/d(var) into ``var.grad`` for every var reachable from ``root``."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        stack.extend((p, False) for p in node.parents if id(p) not in seen)

    if seed is None:
        if root.value.size != 1:
            raise ValueError("backward without a seed needs a scalar output")
        seed = np.ones_like(root.value)
    if np.shape(seed) != root.value.shape:
        raise ValueError(f"seed shape {np.shape(seed)} != output shape {root.value.shape}")
    _accumulate(root, seed)
    for node in reversed(order):
        if node._push is not None and node.grad is not None:
            node._push(node.grad)


# --- convolution --------------------------------------------------------------


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(C, nx, ny, nz) -> (nx*ny*nz, C*k^3) with zero 'same' padding."""
    r = k // 2
    xp = np.pad(x, ((0, 0), (r, r), (r, r), (r, r)))
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    c = x.shape[0]
    n = x.shape[1] * x.shape[2] * x.shape[3]
    return win.transpose(1, 2, 3, 0, 4, 5, 6).reshape(n, c * k**3)


def conv3d_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Cross-correlation with zero padding; ``w`` is (out, in, k, k, k)."""
    cout, cin, k = w.shape[0], w.shape[1], w.shape[2]
    if x.shape[0] != cin:
        raise ValueError(f"input has {x.shape[0]} channels, filter expects {cin}")
    out = _im2col(x, k) @ w.reshape(cout, -1).T
    return np.ascontiguousarray(out.T).reshape((cout,) + x.shape[1:])


def _flip_transpose(w: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))


def conv3d(x: Var, w: Var, b: Var) -> Var:
    k = w.value.shape[2]
    val = conv3d_same(x.value, w.value) + b.value[:, None, None, None]

    def push(g):
        cout = g.shape[0]
        g2 = g.reshape(cout, -1)
        _accumulate(w, (g2 @ _im2col(x.value, k)).reshape(w.value.shape))
        _accumulate(b, g2.sum(axis=1))
        _accumulate(x, conv3d_same(g, _flip_transpose(w.value)))

    return Var(val, (x, w, b), push, "conv3d")


# --- pointwise ----------------------------------------------------------------


def add(a: Var, b: Var) -> Var:
    def push(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return Var(a.value + b.value, (a, b), push, "add")


def leaky_relu(x: Var, slope: float = 0.1) -> Var:
    pos = x.value > 0
    val = np.where(pos, x.value, slope * x.value)

    def push(g):
        _accumulate(x, np.where(pos, g, slope * g))

    return Var(val, (x,), push, "leaky_relu")


def elu(x: Var) -> Var:
    neg = np.expm1(np.minimum(x.value, 0.0))
    val = np.where(x.value > 0, x.value, neg)

    def push(g):
        _accumulate(x, np.where(x.value > 0, g, g * (neg + 1.0)))

    return Var(val, (x,), push, "elu")


def identity(x: Var) -> Var:
    return x


def dropout(x: Var, rate: float, rng: np.random.Generator) -> Var:
    """Inverted dropout; callers skip it entirely at inference."""
    if rate <= 0:
        return x
    keep = (rng.random(x.value.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(x.value.dtype)

    def push(g):
        _accumulate(x, g * keep)

    return Var(x.value * keep, (x,), push, "dropout")


ACTIVATIONS = {
    "leaky_relu": leaky_relu,
    "relu": lambda x: leaky_relu(x, 0.0),
    "elu": elu,
    "linear": identity,
}


# --- physics and loss ---------------------------------------------------------


def backproject(ys: list, term) -> Var:
    """``(1/L) sum_l Phi_l'^H y_l`` where ``term`` supplies ``apply(op, .)`` (self-adjoint)."""
    L = len(ys)
    val = sum(term.apply(op, y.value[0]) for op, y in zip(term.stack.ops, ys)) / L

    def push(g):
        for op, y in zip(term.stack.ops, ys):
            _accumulate(y, term.apply(op, g[0])[None] / L)

    return Var(val[None], tuple(ys), push, "backproject")


def dc_step(x: Var, rhs: Var, term, alpha: float) -> Var:
    """``x + alpha * (rhs - N x)`` with ``N = term.normal`` symmetric."""
    val = x.value + alpha * (rhs.value - term.normal(x.value[0])[None])

    def push(g):
        _accumulate(x, g - alpha * term.normal(g[0])[None])
        _accumulate(rhs, alpha * g)

    return Var(val, (x, rhs), push, "dc_step")


def sq_error(pred: Var, target: np.ndarray) -> Var:
    """``sum (pred - target)^2``."""
    diff = pred.value - target
    val = np.array(np.vdot(diff, diff).real)

    def push(g):
        _accumulate(pred, 2.0 * g * diff)

    return Var(val, (pred,), push, "sq_error")
