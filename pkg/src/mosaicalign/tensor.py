"""Dense tensors with reverse-mode autodiff on a dynamic tape.

Every numeric operation used by the encoders and losses lives here. The
graph is rebuilt on every forward pass; ``backward()`` walks it once in
reverse topological order. Broadcasting is deliberately restricted: two
operands combine only when the result shape equals one of the operand
shapes (covers scalar mixing and row/column expansion, rejects outer-style
double expansion).
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf, expit

from .errors import NumericError, ShapeError

_node_ids = itertools.count()
_grad_enabled = True

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional float array, optionally carrying a gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_wrap(other, self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Populate ``grad`` on every requires-grad tensor reachable from here.

        Only scalar roots are supported; traversal visits each node exactly
        once, in reverse topological order.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar root, got shape {self.shape}")
        order = topological_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)


def topological_order(root: Tensor) -> list[Tensor]:
    """Materialize the recorded graph as a parents-before-children list."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _accum(parent: Tensor, grad: np.ndarray) -> None:
    if not parent.requires_grad:
        return
    if parent.grad is None:
        parent.grad = np.array(grad, dtype=parent.data.dtype)
    else:
        parent.grad += grad


def _accum_owned(parent: Tensor, grad: np.ndarray) -> None:
    """Accumulate a freshly allocated gradient; the caller cedes ownership."""
    if not parent.requires_grad:
        return
    if parent.grad is None:
        parent.grad = grad
    else:
        parent.grad += grad


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    requires = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _check_broadcast(a: Tensor, b: Tensor) -> tuple[int, ...]:
    """Result shape if the pair is an allowed broadcast, else ShapeError."""
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    try:
        out = np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"shapes {sa} and {sb} do not broadcast") from None
    if out != sa and out != sb:
        raise ShapeError(
            f"broadcast of {sa} and {sb} would expand both operands; "
            "only scalar and row/column expansion are supported"
        )
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    _check_broadcast(a, b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _node(out_data, (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    _check_broadcast(a, b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.shape))

    return _node(out_data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    _check_broadcast(a, b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accum_owned(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum_owned(b, _unbroadcast(g * a.data, b.shape))

    return _node(out_data, (a, b), backward)


def div(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    _check_broadcast(a, b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accum_owned(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum_owned(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(out_data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum_owned(a, -g)

    return _node(-a.data, (a,), backward)


# ---------------------------------------------------------------------------
# matmul and shape ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2D @ 2D, batched 3D @ 3D, or 3D @ 2D (shared weight)."""
    sa, sb = a.shape, b.shape
    if len(sa) < 2 or len(sb) < 2:
        raise ShapeError(f"matmul needs ≥2-dim operands, got {sa} and {sb}")
    if sa[-1] != sb[-2 if len(sb) > 1 else 0]:
        raise ShapeError(f"matmul inner dimensions disagree: {sa} vs {sb}")
    if len(sa) == 2 and len(sb) == 2:
        out_data = a.data @ b.data

        def backward(g):
            if a.requires_grad:
                _accum_owned(a, g @ b.data.T)
            if b.requires_grad:
                _accum_owned(b, a.data.T @ g)

    elif len(sa) == 3 and len(sb) == 3:
        if sa[0] != sb[0]:
            raise ShapeError(f"batched matmul batch dims disagree: {sa} vs {sb}")
        out_data = a.data @ b.data

        def backward(g):
            if a.requires_grad:
                _accum_owned(a, g @ b.data.transpose(0, 2, 1))
            if b.requires_grad:
                _accum_owned(b, a.data.transpose(0, 2, 1) @ g)

    elif len(sa) == 3 and len(sb) == 2:
        out_data = a.data @ b.data

        def backward(g):
            if a.requires_grad:
                _accum_owned(a, g @ b.data.T)
            if b.requires_grad:
                _accum_owned(b, np.tensordot(a.data, g, axes=([0, 1], [0, 1])))

    else:
        raise ShapeError(f"unsupported matmul ranks: {sa} @ {sb}")
    return _node(out_data, (a, b), backward)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accum(a, np.transpose(g, inverse))

    return _node(np.transpose(a.data, axes), (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = a.shape

    def backward(g):
        _accum(a, g.reshape(orig))

    return _node(np.ascontiguousarray(a.data).reshape(shape), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, offsets, axis=axis)):
            _accum(t, piece)

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[index] += g

    return _node(a.data[index].copy(), (a,), backward)


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Differentiable row lookup: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)

    def backward(g):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.shape[-1]))

    return _node(table.data[ids], (table,), backward)


def take_positions(a: Tensor, positions: np.ndarray) -> Tensor:
    """Pick one row per batch element: out[b] = a[b, positions[b]]."""
    positions = np.asarray(positions)
    batch = np.arange(a.shape[0])

    def backward(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, (batch, positions), g)

    return _node(a.data[batch, positions].copy(), (a,), backward)


# ---------------------------------------------------------------------------
# reductions

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.shape[i] for i in axis]))
    else:
        count = a.shape[axis]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g / count, a.shape))

    return _node(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)


# ---------------------------------------------------------------------------
# unary nonlinearities

def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        _accum_owned(a, g * out_data)

    return _node(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        _accum_owned(a, g / a.data)

    return _node(np.log(a.data), (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        _accum_owned(a, g * (0.5 / out_data))

    return _node(out_data, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), overflow-safe."""
    def backward(g):
        _accum_owned(a, g * expit(a.data))

    return _node(np.logaddexp(0.0, a.data), (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
        _accum_owned(a, g * (cdf + a.data * pdf))

    return _node(a.data * cdf, (a,), backward)


# ---------------------------------------------------------------------------
# fused ops (single tape node, closed-form backward)

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b for 2D or batched-3D ``x`` and a 2D weight.

    Batched inputs collapse to one flat GEMM.
    """
    sx, sw = x.shape, w.shape
    if len(sw) != 2 or sx[-1] != sw[0]:
        raise ShapeError(f"linear shapes disagree: {sx} @ {sw}")
    flat = x.data.reshape(-1, sx[-1]) if x.ndim != 2 else x.data
    out_data = flat @ w.data
    if b is not None:
        out_data += b.data
    if x.ndim != 2:
        out_data = out_data.reshape(*sx[:-1], sw[1])

    def backward(g):
        g2 = g.reshape(-1, sw[1]) if g.ndim != 2 else g
        if x.requires_grad:
            _accum_owned(x, (g2 @ w.data.T).reshape(sx))
        if w.requires_grad:
            _accum_owned(w, flat.T @ g2)
        if b is not None and b.requires_grad:
            _accum_owned(b, g2.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _node(out_data, parents, backward)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[B, n, w] -> [B*heads, n, w/heads]."""
    b, n, w = x.shape
    dh = w // heads
    out_data = np.ascontiguousarray(
        x.data.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)
    ).reshape(b * heads, n, dh)

    def backward(g):
        _accum_owned(
            x,
            np.ascontiguousarray(
                g.reshape(b, heads, n, dh).transpose(0, 2, 1, 3)
            ).reshape(b, n, w),
        )

    return _node(out_data, (x,), backward)


def merge_heads(x: Tensor, batch: int) -> Tensor:
    """[B*heads, n, dh] -> [B, n, heads*dh]."""
    bh, n, dh = x.shape
    heads = bh // batch
    out_data = np.ascontiguousarray(
        x.data.reshape(batch, heads, n, dh).transpose(0, 2, 1, 3)
    ).reshape(batch, n, heads * dh)

    def backward(g):
        _accum_owned(
            x,
            np.ascontiguousarray(
                g.reshape(batch, n, heads, dh).transpose(0, 2, 1, 3)
            ).reshape(bh, n, dh),
        )

    return _node(out_data, (x,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis``; rejects NaN input."""
    m = np.max(a.data, axis=axis, keepdims=True)
    if np.isnan(m).any():
        raise NumericError("softmax received NaN input")
    out_data = a.data - m
    np.exp(out_data, out=out_data)
    out_data /= out_data.sum(axis=axis, keepdims=True)

    def backward(g):
        if axis in (-1, a.ndim - 1):
            inner = np.einsum("...c,...c->...", g, out_data)[..., None]
        else:
            inner = (g * out_data).sum(axis=axis, keepdims=True)
        dx = g - inner
        dx *= out_data
        _accum_owned(a, dx)

    return _node(out_data, (a,), backward)


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Stable log-sum-exp; the max shift is a constant so gradients stay exact."""
    m = np.max(a.data, axis=axis, keepdims=True)
    if np.isnan(m).any():
        raise NumericError("logsumexp received NaN input")
    e = exp(sub(a, Tensor(m)))
    out = add(log(sum_(e, axis=axis, keepdims=True)), Tensor(m))
    if not keepdims:
        shape = list(out.shape)
        del shape[axis if axis >= 0 else len(shape) + axis]
        out = reshape(out, tuple(shape))
    return out


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize the last axis to zero mean / unit variance, then affine."""
    n = x.shape[-1]
    if n < 2:
        raise ShapeError(f"layernorm needs last-axis size ≥ 2, got {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_sigma = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_sigma
    out_data = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            _accum_owned(gain, np.einsum("bc,bc->c", g.reshape(-1, n), xhat.reshape(-1, n)))
        if bias.requires_grad:
            _accum_owned(bias, g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            s1 = dxhat.sum(axis=-1, keepdims=True)
            s2 = np.einsum("...c,...c->...", dxhat, xhat)[..., None]
            dxhat -= (s1 + xhat * s2) / n
            dxhat *= inv_sigma
            _accum_owned(x, dxhat)

    return _node(out_data, (x, gain, bias), backward)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale rows to unit Euclidean norm. Input rows must be nonzero."""
    if axis != -1:
        raise ShapeError("l2_normalize only supports the last axis")
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    out_data = x.data / norm

    def backward(g):
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        _accum_owned(x, (g - out_data * inner) / norm)

    return _node(out_data, (x,), backward)


def cosine_similarity_matrix(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs cosine similarity of the rows of ``a`` [N,d] and ``b`` [M,d]."""
    an = l2_normalize(a)
    bn = l2_normalize(b)
    return matmul(an, transpose(bn, (1, 0)))


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over rows of -sum_j targets[i,j] * log softmax(logits)[i,j].

    ``targets`` is a constant row-stochastic matrix. Index-target cross
    entropy is this with one-hot rows, so both share one computation.
    """
    targets = np.asarray(targets, dtype=logits.data.dtype)
    if targets.shape != logits.shape:
        raise ShapeError(f"targets shape {targets.shape} != logits shape {logits.shape}")
    lse = logsumexp(logits, axis=-1, keepdims=True)
    weighted = sum_(mul(logits, Tensor(targets)), axis=-1, keepdims=True)
    per_row = sub(mul(lse, Tensor(targets.sum(axis=-1, keepdims=True))), weighted)
    return mean_(per_row)


def cross_entropy_with_logits(logits: Tensor, target_ids: np.ndarray) -> Tensor:
    """Index-target cross entropy, mean over rows."""
    target_ids = np.asarray(target_ids)
    onehot = np.zeros(logits.shape, dtype=logits.data.dtype)
    onehot[np.arange(logits.shape[0]), target_ids] = 1.0
    return softmax_cross_entropy(logits, onehot)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross entropy on logits; caller reduces."""
    targets = np.asarray(targets, dtype=logits.data.dtype)
    if targets.shape != logits.shape:
        raise ShapeError(f"targets shape {targets.shape} != logits shape {logits.shape}")
    return sub(softplus(logits), mul(logits, Tensor(targets)))
