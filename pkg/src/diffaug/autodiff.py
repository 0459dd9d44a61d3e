"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Every operation produces a :class:`Tensor`; when any input requires a
gradient the output keeps a reference to the producing :class:`Node`.
``backward`` linearises the reachable graph into a :class:`Tape` (parents
before children) and replays it once in reverse.

Broadcasting is deliberately narrow: elementwise operands must have equal
shapes, or one of them is a scalar, or the smaller shape equals the
trailing dimensions of the larger one (a bias added to a batch).  Anything
else needs an explicit :func:`broadcast_to` or :func:`reshape`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import sparse


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class Node:
    op: str
    parents: tuple
    backward: Callable[[np.ndarray], tuple]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "_consumed")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return negate(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out._consumed = False
    out.requires_grad = any(p.requires_grad for p in parents)
    out.node = Node(op, tuple(parents), backward_fn) if out.requires_grad else None
    return out


class Tape:
    """Topologically ordered record of the graph behind one output."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in t.node.parents:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward already ran through this graph; rebuild it first")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor requiring grad")
    tape = Tape.from_output(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t.node.parents, t.node.backward(g)):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
    loss._consumed = True


def grad(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` w.r.t. ``params`` without touching existing ``.grad``."""
    saved = [p.grad for p in params]
    for p in params:
        p.grad = None
    try:
        backward(loss)
        return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
    finally:
        for p, s in zip(params, saved):
            p.grad = s


# ---------------------------------------------------------------- broadcasting

def _check_elementwise(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape == b.shape or a.size == 1 and a.ndim <= b.ndim or b.size == 1 and b.ndim <= a.ndim:
        return
    small, big = (a, b) if a.ndim < b.ndim else (b, a)
    if small.ndim < big.ndim and big.shape[big.ndim - small.ndim:] == small.shape:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a.data, b.data, "add")
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a.data, b.data, "sub")
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a.data, b.data, "mul")
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a.data, b.data, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("div", out, (a, b), bw)


def negate(a) -> Tensor:
    a = as_tensor(a)
    return _make("negate", -a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make("square", a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make("log", out, (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", a.data * mask, (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a) -> Tensor:
    a = as_tensor(a)
    out = _softmax(a.data)
    return _make("softmax", out, (a,),
                 lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


# ---------------------------------------------------------------- reductions / shape

def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(ax % ndim for ax in axes)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))
    return sum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return _make("transpose", a.data.T.copy(), (a,), lambda g: (g.T,))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _make("broadcast", out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def index_select(a, index, axis: int = 0) -> Tensor:
    """Gather ``a`` along ``axis`` with an integer index array (repeats allowed)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    axis = axis % a.ndim
    if index.size and (index.min() < -a.shape[axis] or index.max() >= a.shape[axis]):
        raise ShapeError("index_select: index out of range")
    out = np.take(a.data, index, axis=axis)

    def bw(g):
        moved = np.moveaxis(g, axis, 0).reshape(index.size, -1)
        flat = index.reshape(-1) % a.shape[axis]
        scatter = sparse.csr_matrix((np.ones(flat.size), (flat, np.arange(flat.size))),
                                    shape=(a.shape[axis], flat.size))
        acc = np.asarray(scatter @ moved)
        rest = tuple(np.delete(a.shape, axis))
        return (np.moveaxis(acc.reshape((a.shape[axis],) + rest), 0, axis),)

    return _make("index_select", out, (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make("concat", out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def pad(a, widths) -> Tensor:
    """Zero-pad; ``widths`` is a per-axis sequence of (before, after)."""
    a = as_tensor(a)
    out = np.pad(a.data, widths)
    slices = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _make("pad", out, (a,), lambda g: (g[slices],))


# ---------------------------------------------------------------- linear algebra / losses

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.outer(g, b.data) if b.ndim == 1 and a.ndim == 2 else (
                b.data @ g if a.ndim == 1 else g @ b.data.T)
        if b.requires_grad:
            if a.ndim == 1:
                gb = np.outer(a.data, g) if b.ndim == 2 else a.data * g
            else:
                gb = a.data.T @ g
        return ga, gb

    return _make("matmul", out, (a, b), bw)


def cross_entropy(logits, labels) -> Tensor:
    """Per-example softmax cross-entropy; ``logits`` is (B, C), labels int (B,)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("label out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(labels.size)
    out = lse - z[rows, labels]

    def bw(g):
        p = _softmax(logits.data)
        p[rows, labels] -= 1.0
        return (p * g[:, None],)

    return _make("cross_entropy", out, (logits,), bw)


_UNARY = {
    "exp": exp, "log": log, "tanh": tanh, "sigmoid": sigmoid, "softmax": softmax,
    "relu": relu, "square": square, "negate": negate,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div, "matmul": matmul}


def forward_op(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch by name; used by the property tests that sweep every op kind."""
    if op_kind in _UNARY:
        return _UNARY[op_kind](*inputs)
    if op_kind in _BINARY:
        return _BINARY[op_kind](*inputs)
    table = {"sum": sum, "mean": mean, "broadcast": broadcast_to, "reshape": reshape,
             "index-select": index_select, "cross-entropy-with-logits": cross_entropy,
             "transpose": transpose, "concat": concat, "pad": pad}
    if op_kind not in table:
        raise ValueError(f"unknown op kind {op_kind!r}")
    return table[op_kind](*inputs, **kwargs)


def mlp_input_gradient(params: Sequence[Tensor], z) -> Tensor:
    """Input gradient of the tanh surrogate ``c(z) = tanh(z W1 + b1) w2 + b2``.

    ``params`` is ``(W1, b1, w2, b2)`` with ``W1`` of shape (D, H).  ``z`` may
    be a single input (D,) or a batch (B, D); the result has the same shape
    and stays on the tape, so it can be differentiated again w.r.t. the
    parameters.
    """
    w1, b1, w2, _ = params
    z = as_tensor(z)
    hidden = tanh(add(matmul(z, w1), b1))
    slope = mul(sub(1.0, square(hidden)), w2)
    return matmul(slope, transpose(w1))


def mlp_forward(params: Sequence[Tensor], z) -> Tensor:
    w1, b1, w2, b2 = params
    hidden = tanh(add(matmul(as_tensor(z), w1), b1))
    return add(matmul(hidden, w2), b2)
