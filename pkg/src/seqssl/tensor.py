"""Dense float64 tensors with reverse-mode automatic differentiation.

A small tape-based engine: every primitive records its inputs and a backward
closure on the output tensor, and `backward` replays the implied tape in
reverse topological order.  Only the primitives needed by the encoder-decoder
model are provided.  The single broadcasting rule is bias-add along the last
dimension; everything else requires exact shapes, so shape bugs fail loudly at
the offending primitive.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform to a primitive's signature."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (decoding, label generation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float64 array plus the bookkeeping needed for backprop.

    Tensors are treated as immutable after creation; parameter updates build
    new tensors.  ``grad`` is populated (on leaves) by :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward_fn = None
        self._op = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}, op={self._op})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _result(op: str, data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap a primitive's output, recording the tape entry when needed."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
        out._op = op
    return out


def _check(cond: bool, op: str, *shapes):
    if not cond:
        raise ShapeError(f"{op}: shapes {' and '.join(str(tuple(s)) for s in shapes)} do not conform")


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.data.ndim == 2 and b.data.ndim == 2 and a.shape[1] == b.shape[0],
           "matmul", a.shape, b.shape)

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _result("matmul", a.data @ b.data, (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; a 1-D or single-row second operand is broadcast as a
    bias over the last dimension."""
    if a.shape == b.shape:
        def bw(g):
            return g, g
    elif b.data.ndim == 1 and a.shape[-1] == b.shape[0]:
        def bw(g):
            return g, g.reshape(-1, b.shape[0]).sum(axis=0)
    elif (b.data.ndim == 2 and a.data.ndim == 2 and b.shape[0] == 1
          and a.shape[1] == b.shape[1]):
        def bw(g):
            return g, g.sum(axis=0, keepdims=True)
    else:
        _check(False, "add", a.shape, b.shape)
    return _result("add", a.data + b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, "mul", a.shape, b.shape)

    def bw(g):
        return g * b.data, g * a.data

    return _result("mul", a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        return (g * c,)

    return _result("scale", a.data * c, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - y * y),)

    return _result("tanh", y, (a,), bw)


def logistic(a: Tensor) -> Tensor:
    # stable in both tails
    y = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                 np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))

    def bw(g):
        return (g * y * (1.0 - y),)

    return _result("logistic", y, (a,), bw)


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax over the last dimension."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result("softmax", y, (a,), bw)


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _result("log_softmax", y, (a,), bw)


def log(a: Tensor) -> Tensor:
    x = a.data

    def bw(g):
        return (g / x,)

    return _result("log", np.log(x), (a,), bw)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    _check(len(parts) >= 1, "concat", (0,))
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(parts)))

    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[tuple(p.shape) for p in parts]} along axis {axis}: {exc}")
    return _result("concat", data, parts, bw)


def tslice(a: Tensor, key) -> Tensor:
    """Basic (view-style) slicing; gradients are scatter-added back."""
    data = a.data[key]

    def bw(g):
        out = np.zeros_like(a.data)
        out[key] = g
        return (out,)

    return _result("slice", data, (a,), bw)


def transpose(a: Tensor) -> Tensor:
    _check(a.data.ndim == 2, "transpose", a.shape)

    def bw(g):
        return (g.T,)

    return _result("transpose", a.data.T, (a,), bw)


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    ids = np.asarray(ids, dtype=np.intp)
    _check(table.data.ndim == 2, "embedding", table.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table {tuple(table.shape)}")

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return (out,)

    return _result("embedding", table.data[ids], (table,), bw)


def dropout_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    """Pre-sampled inverted-scaling dropout mask: kept units scaled by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability {p} outside [0, 1)")
    if p == 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= p) / (1.0 - p)


def dropout_apply(a: Tensor, mask: np.ndarray) -> Tensor:
    mask = np.asarray(mask, dtype=np.float64)
    _check(a.shape == mask.shape, "dropout", a.shape, mask.shape)

    def bw(g):
        return (g * mask,)

    return _result("dropout", a.data * mask, (a,), bw)


def tsum(a: Tensor) -> Tensor:
    def bw(g):
        return (np.full_like(a.data, float(g)),)

    return _result("sum", np.sum(a.data), (a,), bw)


_PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "tanh": tanh,
    "logistic": logistic,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "log": log,
    "concat": concat,
    "slice": tslice,
    "transpose": transpose,
    "embedding": embedding,
    "dropout": dropout_apply,
    "sum": tsum,
    "scale": scale,
}


def apply_primitive(op: str, inputs: Sequence, **kwargs) -> Tensor:
    """Dispatch a primitive by id.  Unknown ops and bad shapes are rejected."""
    if op not in _PRIMITIVES:
        raise ValueError(f"unknown primitive {op!r}")
    fn = _PRIMITIVES[op]
    if op == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# reverse pass


def _toposort(root: Tensor) -> list[Tensor]:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Backpropagate from a scalar loss through its recorded tape.

    Returns a map from every leaf tensor with ``requires_grad`` to its
    gradient (also stored on ``leaf.grad``).  Deterministic: identical tapes
    yield identical gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward_fn is None:
            if node.requires_grad:
                node.grad = g
                leaf_grads[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward_fn(g)):
            if not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    return leaf_grads


def finite_difference_check(f: Callable[[], Tensor], leaves: Sequence[Tensor],
                            step: float = 1e-4) -> float:
    """Max relative error between autodiff gradients and central differences.

    ``f`` must be a deterministic scalar function of ``leaves`` (fixed seeds,
    dropout disabled or mask-frozen); two identical evaluations are compared
    to detect nondeterminism.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = f()
    again = f()
    if not np.array_equal(base.data, again.data):
        raise ValueError("finite_difference_check: f is not deterministic")
    grads = backward(base)
    worst = 0.0
    for leaf in leaves:
        g = grads.get(leaf)
        if g is None:
            g = np.zeros_like(leaf.data)
        flat = leaf.data.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            hi = float(f().data)
            flat[k] = orig - step
            lo = float(f().data)
            flat[k] = orig
            fd = (hi - lo) / (2.0 * step)
            err = abs(gflat[k] - fd) / max(abs(fd), 1e-8)
            worst = max(worst, err)
    return worst
