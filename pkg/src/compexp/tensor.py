"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the operations the explainer model needs are provided. Every op builds a
node holding its parents and a closure that pushes the output gradient back to
them; :meth:`Tensor.backward` walks the graph once in reverse topological
order.
"""

from __future__ import annotations

import contextlib
from typing import Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the graph (inference, sampling)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    # let numpy operands defer to Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            _not_scalar(self)
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf.

        Grads accumulate; callers zero them between steps.
        """
        if self.data.size != 1:
            _not_scalar(self)
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
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
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def _not_scalar(t: Tensor):
    raise ValueError(f"expected a single-element tensor, got shape {t.shape}")


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


# ---------------------------------------------------------------------------
# reductions and normalisers
# ---------------------------------------------------------------------------


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), backward)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    weights = e / s

    def backward(g):
        return (np.expand_dims(g, axis) * weights,)

    return _node(out, (x,), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """``a @ b`` with numpy semantics; 1-d operands are promoted and squeezed."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ValueError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (-1, 1))), a.shape[:-1])
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, -1)), b), a.shape[:-1] + b.shape[:-2] + b.shape[-1:])
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), backward)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity.

    Two vectors give a scalar. Stacks ``a: (..., n, d)`` and ``b: (..., m, d)``
    give the pairwise matrix ``(..., n, m)``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-1] or a.ndim != b.ndim:
        raise ValueError(f"cosine_similarity: incompatible shapes {a.shape} and {b.shape}")
    if a.ndim == 1:
        return reshape(cosine_similarity(reshape(a, (1, -1)), reshape(b, (1, -1))), ())
    na = np.linalg.norm(a.data, axis=-1, keepdims=True)
    nb = np.linalg.norm(b.data, axis=-1, keepdims=True)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise ValueError("cosine_similarity: zero-norm vector, cosine undefined")
    au, bu = a.data / na, b.data / nb
    cos = np.matmul(au, np.swapaxes(bu, -1, -2))

    def backward(g):
        # d cos / d a = b_hat/|a| - cos * a_hat/|a|
        ga = (np.matmul(g, bu) - (g * cos).sum(axis=-1, keepdims=True) * au) / na
        gt = np.swapaxes(g, -1, -2)
        gb = (np.matmul(gt, au) - (gt * np.swapaxes(cos, -1, -2)).sum(axis=-1, keepdims=True) * bu) / nb
        return ga, gb

    return _node(cos, (a, b), backward)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    return _node(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def getitem(x: Tensor, index) -> Tensor:
    """Indexing/slicing; integer-array indices act as a gather (embedding lookup)."""
    out = x.data[index]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _node(np.array(out), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ValueError("concat: incompatible shapes " + ", ".join(str(t.shape) for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ValueError("stack: incompatible shapes " + ", ".join(str(t.shape) for t in tensors)) from None
    n = len(tensors)
    return _node(out, tensors,
                 lambda g: tuple(np.squeeze(p, axis=axis) for p in np.split(g, n, axis=axis)))


# ---------------------------------------------------------------------------
# recurrent kernel
# ---------------------------------------------------------------------------


def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gru(x: Tensor, h0: Tensor, W: Tensor, U: Tensor, bx: Tensor, bh: Tensor,
        mask=None, reverse: bool = False) -> Tensor:
    """Single-layer GRU over a padded batch, as one graph node.

    ``x`` is ``(B, L, E)``, ``h0`` is ``(B, H)``; gate blocks in ``W (E, 3H)``,
    ``U (H, 3H)`` and the biases are ordered reset, update, candidate. Where
    ``mask[b, t] == 0`` the hidden state is carried through unchanged, so
    right-padded sequences also work with ``reverse=True``. Returns the
    ``(B, L, H)`` state at every position.
    """
    x, h0 = as_tensor(x), as_tensor(h0)
    B, L, E = x.shape
    H = U.shape[0]
    if W.shape != (E, 3 * H) or U.shape != (H, 3 * H) or h0.shape != (B, H):
        raise ValueError(f"gru: incompatible shapes x={x.shape} h0={h0.shape} W={W.shape} U={U.shape}")
    m = np.ones((B, L)) if mask is None else np.asarray(mask, dtype=np.float64)
    A = np.matmul(x.data, W.data) + bx.data
    steps = range(L - 1, -1, -1) if reverse else range(L)
    out = np.empty((B, L, H))
    cache = []
    h = h0.data
    Ud, bhd = U.data, bh.data
    for t in steps:
        a = A[:, t]
        g = h @ Ud + bhd
        r = _sig(a[:, :H] + g[:, :H])
        z = _sig(a[:, H:2 * H] + g[:, H:2 * H])
        n = np.tanh(a[:, 2 * H:] + r * g[:, 2 * H:])
        hn = n + z * (h - n)
        mt = m[:, t:t + 1]
        h_next = h + mt * (hn - h)
        cache.append((t, h, r, z, n, g[:, 2 * H:], mt))
        out[:, t] = h_next
        h = h_next

    def backward(gout):
        dA = np.zeros_like(A)
        dU = np.zeros_like(Ud)
        dbh = np.zeros_like(bhd)
        carry = np.zeros((B, H))
        for t, h_prev, r, z, n, gn, mt in reversed(cache):
            dtot = gout[:, t] + carry
            dhn = mt * dtot
            dprev = (1.0 - mt) * dtot + dhn * z
            dn = dhn * (1.0 - z)
            dz = dhn * (h_prev - n)
            dan = dn * (1.0 - n * n)
            dr = dan * gn
            dar = dr * r * (1.0 - r)
            daz = dz * z * (1.0 - z)
            dG = np.concatenate([dar, daz, dan * r], axis=1)
            dA[:, t] = np.concatenate([dar, daz, dan], axis=1)
            dprev += dG @ Ud.T
            dU += h_prev.T @ dG
            dbh += dG.sum(axis=0)
            carry = dprev
        dx = np.matmul(dA, W.data.T)
        dW = np.tensordot(x.data, dA, axes=([0, 1], [0, 1]))
        dbx = dA.sum(axis=(0, 1))
        return dx, carry, dW, dU, dbx, dbh

    return _node(out, (x, h0, W, U, bx, bh), backward)
