"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever at
least one input requires a gradient. Outside a tape everything runs as plain
numpy, which is what evaluation code wants.

Broadcasting is limited to scalar-with-tensor and equal shapes; anything else
goes through :func:`broadcast_to` or :func:`reshape` explicitly.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DomainError",
    "as_tensor",
    "parameter",
    "current_tape",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "logaddexp",
    "square",
    "abs_",
    "elementwise",
    "reduce",
    "sum_",
    "mean",
    "max_",
    "reshape",
    "transpose",
    "getitem",
    "concat",
    "stack",
    "broadcast_to",
    "scale_rows",
    "linear",
    "spmm",
    "segment_sum",
    "segment_max",
    "record_op",
    "gather_rows",
    "log_softmax",
    "logsumexp",
    "clip",
    "custom_grad",
    "stop_gradient",
    "grad_check",
]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Append-only record of operations for one forward pass.

    Use as a context manager around the forward computation, then call
    :meth:`backward` once. Leaf gradients accumulate into ``Tensor.grad``;
    the tape is cleared afterwards.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.parameters: list[Tensor] = []
        self._seen_leaves: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, out: "Tensor", parents: Sequence["Tensor"], backward: Callable) -> None:
        for p in parents:
            if p.requires_grad and p._tape is not self and id(p) not in self._seen_leaves:
                self._seen_leaves.add(id(p))
                self.parameters.append(p)
        out.requires_grad = True
        out._tape = self
        out._grad_id = len(self.nodes)
        self.nodes.append(_Node(out, tuple(parents), backward))

    def backward(self, loss: "Tensor", grad: np.ndarray | None = None) -> None:
        if grad is None:
            if loss.data.size != 1:
                raise ShapeError(f"backward without explicit grad needs a scalar, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != loss.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != output shape {loss.shape}")
        if loss._tape is not self:
            # loss is a leaf (or was computed without recording)
            if loss.requires_grad:
                loss._accumulate(grad)
            self.clear()
            return

        pending: dict[int, np.ndarray] = {loss._grad_id: grad}
        for idx in range(loss._grad_id, -1, -1):
            g = pending.pop(idx, None)
            if g is None:
                continue
            node = self.nodes[idx]
            pgrads = node.backward(g)
            if len(pgrads) != len(node.parents):
                raise ShapeError("backward returned wrong number of parent gradients")
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=np.float64)
                if pg.shape != p.shape:
                    raise ShapeError(f"gradient shape {pg.shape} does not match parent shape {p.shape}")
                if p._tape is self:
                    prev = pending.get(p._grad_id)
                    pending[p._grad_id] = pg if prev is None else prev + pg
                else:
                    p._accumulate(pg)
        self.clear()

    def clear(self) -> None:
        for node in self.nodes:
            node.out._tape = None
            node.out._grad_id = None
        self.nodes = []


class Tensor:
    """A float64 array plus optional gradient bookkeeping."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) or data.dtype != np.float64 else data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None
        self._grad_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad_id(self) -> int | None:
        return self._grad_id

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        self.grad = g.copy() if self.grad is None else self.grad + g

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(out, parents, backward)
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0 or (t.data.size == 1 and t.data.ndim <= 1)


def _check_binary(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape == b.shape or _is_scalar(a) or _is_scalar(b):
        return
    raise ShapeError(
        f"{opname}: shapes {a.shape} and {b.shape} are not broadcast-compatible "
        "(only scalar-with-tensor and equal shapes are allowed)"
    )


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g @ B.T, A.T @ g

    return _make(A @ B, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")
    A, B = a.data, b.data

    def backward(g):
        return _unbroadcast(g * B, a.shape), _unbroadcast(g * A, b.shape)

    return _make(A * B, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "div")
    A, B = a.data, b.data
    out = A / B

    def backward(g):
        return _unbroadcast(g / B, a.shape), _unbroadcast(-g * out / B, b.shape)

    return _make(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive entry")
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,))


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(x * x, (a,), lambda g: (2.0 * g * x,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(np.abs(x), (a,), lambda g: (g * np.sign(x),))


def logaddexp(a, b) -> Tensor:
    """log(exp(a) + exp(b)); entries where both sides are -inf get zero gradient."""
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "logaddexp")
    A, B = a.data, b.data
    out = np.logaddexp(A, B)
    finite = np.isfinite(out)
    safe = np.where(finite, out, 0.0)
    with np.errstate(invalid="ignore"):
        wa = np.where(finite, np.exp(np.where(finite, A, -np.inf) - safe), 0.0)
        wb = np.where(finite, np.exp(np.where(finite, B, -np.inf) - safe), 0.0)

    def backward(g):
        return _unbroadcast(g * wa, a.shape), _unbroadcast(g * wb, b.shape)

    return _make(out, (a, b), backward)


_UNARY = {
    "relu": relu,
    "sigmoid": sigmoid,
    "log": log,
    "exp": exp,
    "neg": neg,
    "tanh": tanh,
    "square": square,
    "abs": abs_,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div, "logaddexp": logaddexp}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch an entrywise operation by name."""
    if op in _UNARY:
        if len(args) != 1:
            raise TypeError(f"{op} takes one argument")
        return _UNARY[op](args[0])
    if op in _BINARY:
        if len(args) != 2:
            raise TypeError(f"{op} takes two arguments")
        return _BINARY[op](*args)
    raise ValueError(f"unknown elementwise op {op!r}")


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axis = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axis_n = _norm_axis(axis, a.ndim)
    count = a.size if axis_n is None else a.shape[axis_n]
    if count == 0:
        raise ShapeError("mean over an empty axis")
    return mul(sum_(a, axis_n, keepdims), 1.0 / count)


def max_(a, axis=None, keepdims=False) -> Tensor:
    """Maximum; the gradient goes to the first (lowest-index) maximal entry."""
    a = as_tensor(a)
    axis = _norm_axis(axis, a.ndim)
    x = a.data
    if axis is None:
        if x.size == 0:
            raise ShapeError("max over an empty tensor")
        flat = int(np.argmax(x.reshape(-1)))
        out = np.asarray(x.reshape(-1)[flat])
        if keepdims:
            out = out.reshape((1,) * x.ndim)

        def backward(g):
            grad = np.zeros(x.size)
            grad[flat] = np.asarray(g).reshape(-1)[0]
            return (grad.reshape(x.shape),)

        return _make(out, (a,), backward)

    if x.shape[axis] == 0:
        raise ShapeError("max over an empty axis")
    idx = np.argmax(x, axis=axis)  # argmax picks the first maximal index
    out = np.take_along_axis(x, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        grad = np.zeros_like(x)
        np.put_along_axis(grad, np.expand_dims(idx, axis), g, axis=axis)
        return (grad,)

    return _make(out, (a,), backward)


_REDUCE = {"sum": sum_, "mean": mean, "max": max_}


def reduce(op: str, t, axis=None, keepdims=False) -> Tensor:
    if op not in _REDUCE:
        raise ValueError(f"unknown reduction {op!r}")
    return _REDUCE[op](t, axis, keepdims)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]
    shape = a.shape

    def backward(g):
        grad = np.zeros(shape)
        np.add.at(grad, idx, g)
        return (grad,)

    return _make(np.array(out, dtype=np.float64), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of nothing")
    axis = _norm_axis(axis, tensors[0].ndim)
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tensors, backward)


def broadcast_to(a, shape) -> Tensor:
    """Explicit numpy-style broadcast; the backward sums over expanded axes."""
    a = as_tensor(a)
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape).copy()
    src = a.shape
    lead = len(shape) - len(src)

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(src) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g.reshape(src),)

    return _make(out, (a,), backward)


def scale_rows(x, s) -> Tensor:
    """Multiply row i of ``x`` (n×d) by ``s[i]`` (length-n vector)."""
    x, s = as_tensor(x), as_tensor(s)
    if x.ndim != 2 or s.shape not in ((x.shape[0],), (x.shape[0], 1)):
        raise ShapeError(f"scale_rows: {x.shape} with scales {s.shape}")
    X, S = x.data, s.data.reshape(-1, 1)
    sshape = s.shape

    def backward(g):
        return g * S, (g * X).sum(axis=1).reshape(sshape)

    return _make(X * S, (x, s), backward)


def linear(x, w, b=None) -> Tensor:
    """x @ w + b with b added to every row."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} with weight {w.shape}")
    X, W = x.data, w.data
    out = X @ W
    if b is None:
        return _make(out, (x, w), lambda g: (g @ W.T, X.T @ g))
    b = as_tensor(b)
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} for weight {w.shape}")
    out = out + b.data

    def backward(g):
        return g @ W.T, X.T @ g, g.sum(axis=0)

    return _make(out, (x, w, b), backward)


def record_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Build a primitive from a forward value and a backward rule.

    ``backward(g)`` must return one gradient (or ``None``) per parent.
    """
    return _make(np.asarray(data, dtype=np.float64), tuple(as_tensor(p) for p in parents), backward)


def spmm(m: sp.spmatrix, x, mt: sp.spmatrix | None = None) -> Tensor:
    """Constant sparse matrix times a dense tensor (``mt`` = cached transpose)."""
    x = as_tensor(x)
    if m.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm: sparse {m.shape} with dense {x.shape}")
    if mt is None:
        mt = m.T.tocsr()
    return _make(np.asarray(m @ x.data), (x,), lambda g: (np.asarray(mt @ g),))


def _segment_matrix(ids: np.ndarray, num_segments: int, weights=None) -> sp.csr_matrix:
    n = len(ids)
    vals = np.ones(n) if weights is None else weights
    return sp.csr_matrix((vals, (ids, np.arange(n))), shape=(num_segments, n))


def segment_sum(x, ids, num_segments: int) -> Tensor:
    """Sum rows of ``x`` into ``num_segments`` buckets given by ``ids``."""
    x = as_tensor(x)
    ids = np.asarray(ids, dtype=np.int64)
    if len(ids) != x.shape[0]:
        raise ShapeError("segment_sum: one id per row required")
    return spmm(_segment_matrix(ids, num_segments), x)


def segment_max(x, ids, num_segments: int) -> Tensor:
    """Per-segment columnwise max; empty segments give 0.

    Each column's gradient goes to the first row (in input order) attaining
    the maximum.
    """
    x = as_tensor(x)
    ids = np.asarray(ids, dtype=np.int64)
    X = x.data
    if len(ids) != X.shape[0]:
        raise ShapeError("segment_max: one id per row required")
    d = X.shape[1]
    out = np.zeros((num_segments, d))
    if len(ids) == 0:
        return _make(out, (x,), lambda g: (np.zeros_like(X),))
    order = np.argsort(ids, kind="stable")
    sid = ids[order]
    starts = np.flatnonzero(np.r_[True, sid[1:] != sid[:-1]])
    segs = sid[starts]
    xs = X[order]
    best = np.maximum.reduceat(xs, starts, axis=0)
    out[segs] = best
    # first position attaining the max within each segment
    pos = np.where(xs == np.repeat(best, np.diff(np.r_[starts, len(sid)]), axis=0),
                   np.arange(len(sid))[:, None], len(sid))
    first = np.minimum.reduceat(pos, starts, axis=0)
    src_rows = order[first]

    def backward(g):
        grad = np.zeros_like(X)
        cols = np.broadcast_to(np.arange(d), src_rows.shape)
        np.add.at(grad, (src_rows, cols), g[segs])
        return (grad,)

    return _make(out, (x,), backward)


def gather_rows(x, idx) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    rows = sp.csr_matrix((np.ones(len(idx)), (np.arange(len(idx)), idx)), shape=(len(idx), x.shape[0]))
    return spmm(rows, x)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), backward)


def standardize(a, axis: int = 1, eps: float = 1e-5) -> Tensor:
    """Shift and scale a 2-D tensor to zero mean and unit (biased) variance along ``axis``."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"standardize expects a 2-D tensor, got shape {a.shape}")
    x = a.data
    centred = x - x.mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt((centred**2).mean(axis=axis, keepdims=True) + eps)
    out = centred * inv

    def backward(g):
        gm = g.mean(axis=axis, keepdims=True)
        gy = (g * out).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - out * gy),)

    return _make(out, (a,), backward)


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Per-row standardisation."""
    return standardize(a, 1, eps)


def logsumexp(a, axis: int = -1) -> Tensor:
    """Stable log-sum-exp along ``axis``; all -inf slices give -inf with zero gradient."""
    a = as_tensor(a)
    axis = _norm_axis(axis, a.ndim)
    x = a.data
    top = x.max(axis=axis, keepdims=True)
    safe_top = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.exp(x - safe_top).sum(axis=axis, keepdims=True)) + safe_top
    finite = np.isfinite(out)
    weights = np.where(finite, np.exp(x - np.where(finite, out, 0.0)), 0.0)

    def backward(g):
        return (np.expand_dims(g, axis) * weights,)

    return _make(np.squeeze(out, axis=axis), (a,), backward)


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def custom_grad(forward_value, parents: Sequence[Tensor], backward_map: Callable) -> Tensor:
    """Node whose forward value is given and whose backward is ``backward_map``.

    ``backward_map(g)`` returns one gradient per parent (a list/tuple, or a
    bare array when there is a single parent).
    """
    value = forward_value.data if isinstance(forward_value, Tensor) else np.asarray(forward_value, dtype=np.float64)
    parents = tuple(as_tensor(p) for p in parents)

    def backward(g):
        res = backward_map(g)
        if isinstance(res, np.ndarray) or not isinstance(res, (list, tuple)):
            res = (res,)
        for p, r in zip(parents, res):
            if r is not None and np.shape(r) != p.shape:
                raise ShapeError(f"custom_grad backward produced {np.shape(r)} for parent of shape {p.shape}")
        return tuple(res)

    return _make(value.copy(), parents, backward)


def stop_gradient(a) -> Tensor:
    return Tensor(as_tensor(a).data.copy())


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max relative error between the tape gradient and central differences."""
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    leaf = parameter(x0.copy())
    with Tape() as tape:
        y = f(leaf)
        if y.size != 1:
            raise ShapeError(f"grad_check needs a scalar-valued function, got shape {y.shape}")
    if y.requires_grad:
        tape.backward(y)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += eps
        xm[i] -= eps
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        flat[i] = (fp - fm) / (2 * eps)
    err = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-12)
    return float(err.max()) if err.size else 0.0
