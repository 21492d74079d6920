"""Minimal reverse-mode tensors over numpy float64 arrays.

The op set is fixed to what the training pipeline needs: affine algebra,
ReLU, row normalization, concatenation, gathers, log-sum-exp and
reductions. Gradients are accumulated on a tape in deterministic
(topological) order, so a fixed seed reproduces runs bit for bit.
"""

from __future__ import annotations

import numpy as np

NORM_EPS = 1e-12


class DegenerateVectorError(ValueError):
    """Raised when a vector with (near-)zero norm reaches a cosine/normalize op."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce `grad` back to `shape` by summing the axes numpy broadcast."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += grad

    def _accumulate_owned(self, grad: np.ndarray) -> None:
        """Like _accumulate, for freshly allocated arrays the op hands over."""
        if self.grad is None:
            self.grad = grad
        else:
            self.grad += grad

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        order = []
        seen = set()
        stack = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
        out.requires_grad = False
    return out


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accumulate(-g)

    return _make(-a.data, (a,), backward)


def mul(a, b) -> Tensor:
    """Elementwise product with broadcasting; either side may be a constant."""
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)

    def backward(g):
        a._accumulate(g * s)

    return _make(a.data * s, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data @ b.data

    def backward(g):
        a._accumulate_owned(g @ b.data.T)
        b._accumulate_owned(a.data.T @ g)

    return _make(data, (a, b), backward)


def matmul_t(a, b) -> Tensor:
    """a @ b.T for 2-D operands."""
    a, b = as_tensor(a), as_tensor(b)
    data = a.data @ b.data.T

    def backward(g):
        a._accumulate_owned(g @ b.data)
        b._accumulate_owned(g.T @ a.data)

    return _make(data, (a, b), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0

    def backward(g):
        a._accumulate_owned(g * mask)

    return _make(a.data * mask, (a,), backward)


def concat_cols(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ca = a.data.shape[1]
    data = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        a._accumulate(g[:, :ca])
        b._accumulate(g[:, ca:])

    return _make(data, (a, b), backward)


def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

    return _make(data, (a,), backward)


def tmean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis=axis), 1.0 / n)


def logsumexp_rows(a) -> Tensor:
    """Row-wise log(sum(exp(.))) for a 2-D tensor, max-subtracted for stability."""
    a = as_tensor(a)
    m = a.data.max(axis=1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=1, keepdims=True)
    data = (m + np.log(s)).reshape(-1)
    soft = e / s

    def backward(g):
        a._accumulate(g[:, None] * soft)

    return _make(data, (a,), backward)


def pick(a, idx) -> Tensor:
    """Select a[i, idx[i]] for each row i; returns a 1-D tensor."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    n = a.data.shape[0]
    rows_ix = np.arange(n)
    data = a.data[rows_ix, idx]

    def backward(g):
        out = np.zeros_like(a.data)
        out[rows_ix, idx] = g  # one target per row, no collisions
        a._accumulate(out)

    return _make(data, (a,), backward)


def rows(a, idx) -> Tensor:
    """Gather rows a[idx]; duplicate indices accumulate gradient additively."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    data = a.data[idx]

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        a._accumulate(out)

    return _make(data, (a,), backward)


def repeat_rows(a, times: int) -> Tensor:
    """Each row repeated `times` consecutively: row i lands at i*times + k."""
    a = as_tensor(a)
    n, d = a.data.shape
    data = np.repeat(a.data, times, axis=0)

    def backward(g):
        a._accumulate_owned(g.reshape(n, times, d).sum(axis=1))

    return _make(data, (a,), backward)


def tile_rows(a, times: int) -> Tensor:
    """The whole matrix stacked `times` over: row i lands at k*n + i."""
    a = as_tensor(a)
    n, d = a.data.shape
    data = np.tile(a.data, (times, 1))

    def backward(g):
        a._accumulate_owned(g.reshape(times, n, d).sum(axis=0))

    return _make(data, (a,), backward)


def row0(a) -> Tensor:
    """First row of a 2-D tensor as a 1-D tensor, keeping the graph."""
    a = as_tensor(a)
    data = a.data[0]

    def backward(g):
        out = np.zeros_like(a.data)
        out[0] = g
        a._accumulate(out)

    return _make(data, (a,), backward)


def normalize_rows(a) -> Tensor:
    """L2-normalize each row; rejects rows with norm <= NORM_EPS."""
    a = as_tensor(a)
    x = a.data if a.data.ndim == 2 else a.data.reshape(1, -1)
    if x.ndim != 2:
        raise ValueError("normalize_rows expects a 1-D or 2-D tensor")
    r = np.sqrt((x * x).sum(axis=1, keepdims=True))
    if np.any(r <= NORM_EPS):
        bad = int(np.argmin(r))
        raise DegenerateVectorError(f"row {bad} has near-zero norm {float(r[bad, 0]):.3e}")
    y = x / r
    squeeze = a.data.ndim == 1

    def backward(g):
        g2 = g.reshape(1, -1) if squeeze else g
        dot = (g2 * y).sum(axis=1, keepdims=True)
        gx = (g2 - y * dot) / r
        a._accumulate(gx.reshape(a.data.shape))

    return _make(y.reshape(a.data.shape), (a,), backward)


def affine(x, w, b) -> Tensor:
    return add(matmul(x, w), b)


def cos_matrix(a, b) -> Tensor:
    """Cosine similarity of every row of `a` against every row of `b` -> (n, m)."""
    return matmul_t(normalize_rows(a), normalize_rows(b))


def cos_rows(a, b) -> Tensor:
    """Row-paired cosine similarity -> 1-D tensor of length n."""
    return tsum(mul(normalize_rows(a), normalize_rows(b)), axis=1)


def ce_rows(scores, gt_idx, temperature: float) -> Tensor:
    """Per-row softmax cross-entropy at the given temperature -> 1-D tensor.

    Fused (scale + log-sum-exp + gather) so a Cartesian-sized batch touches
    one (n, K) temporary instead of four.
    """
    scores = as_tensor(scores)
    if scores.data.ndim != 2 or scores.data.shape[1] == 0:
        raise ValueError("ce_rows expects a non-empty 2-D score matrix")
    idx = np.asarray(gt_idx, dtype=np.int64)
    inv_t = 1.0 / float(temperature)
    n = scores.data.shape[0]
    rows_ix = np.arange(n)
    z = scores.data * inv_t
    z_gt = z[rows_ix, idx]
    m = z.max(axis=1, keepdims=True)
    np.subtract(z, m, out=z)
    np.exp(z, out=z)                      # z now holds exp(z - m)
    tot = z.sum(axis=1, keepdims=True)
    data = (m[:, 0] + np.log(tot[:, 0])) - z_gt
    np.divide(z, tot, out=z)              # z now holds the softmax

    def backward(g):
        gs = z * (g * inv_t)[:, None]
        gs[rows_ix, idx] -= g * inv_t
        scores._accumulate_owned(gs)

    return _make(data, (scores,), backward)


class ParamStore:
    """Named trainable tensors with paired gradient buffers.

    Insertion order is the canonical iteration order everywhere (optimizer
    updates, checkpoints), which keeps training deterministic.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.array(array, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def group(self, prefix: str):
        """Parameters whose name starts with `prefix/` (or equals `prefix`)."""
        return [(n, t) for n, t in self._params.items()
                if n == prefix or n.startswith(prefix + "/")]

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self._params.values())
