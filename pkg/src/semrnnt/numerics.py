"""Dense float64 tensors with a reverse-mode tape.

Every differentiable quantity in the package is a :class:`Tensor`.  A tensor
either lives on a :class:`Tape` (it was produced from a leaf registered on that
tape) or is a free constant.  Operations whose inputs are all constants do not
record anything, so the same model code serves training and inference.

Example:

    >>> tape = Tape()
    >>> x = tape.leaf("x", [1.0, 2.0, 3.0])
    >>> loss = sum_(x * x)
    >>> backward(tape, loss)["x"]
    array([2., 4., 6.])
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

Array = np.ndarray
VJP = Callable[[Array], Sequence["Array | None"]]

NEG_INF = -math.inf

_flip_gradient_sign = False


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shapes."""

    def __init__(self, primitive: str, *shapes):
        self.primitive = primitive
        self.shapes = shapes
        joined = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{primitive}: incompatible shapes {joined}")


@dataclass
class Node:
    op: str
    parents: tuple
    vjp: VJP | None = None
    name: str | None = None
    value: Array | None = None


@dataclass
class Tape:
    """Append-only record of primitive applications.

    Nodes are stored in creation order, so parents always precede children and
    a single reverse sweep is a valid topological traversal.
    """

    nodes: list[Node] = field(default_factory=list)
    _leaf_names: dict[str, int] = field(default_factory=dict)

    def leaf(self, name: str, value) -> "Tensor":
        if name in self._leaf_names:
            raise ValueError(f"duplicate leaf name {name!r}")
        arr = np.array(value, dtype=np.float64)
        self._leaf_names[name] = len(self.nodes)
        self.nodes.append(Node("leaf", (), None, name, arr))
        return Tensor(arr, self, len(self.nodes) - 1)

    def leaves(self, arrays: Mapping[str, Array]) -> dict[str, "Tensor"]:
        return {k: self.leaf(k, v) for k, v in arrays.items()}

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """A float64 array, optionally attached to a tape."""

    __slots__ = ("value", "tape", "index")
    __array_priority__ = 100

    def __init__(self, value, tape: Tape | None = None, index: int | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        where = "const" if self.tape is None else f"node {self.index}"
        return f"Tensor({self.value!r}, {where})"

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> Array:
        return self.value

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, key: getitem(self, key)


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def as_tensor(value) -> Tensor:
    return constant(value)


def record(op: str, value: Array, parents: Sequence[Tensor], vjp: VJP) -> Tensor:
    """Wrap ``value`` as the output of primitive ``op``.

    ``vjp`` maps the output cotangent to one cotangent per parent (``None``
    meaning zero).  Nothing is recorded when no parent lives on a tape.
    """
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is not None and p.tape is not tape:
                raise ValueError(f"{op}: operands live on different tapes")
            tape = p.tape
    if tape is None:
        return Tensor(value)
    idx = tuple(p.index if p.tape is tape else None for p in parents)
    tape.nodes.append(Node(op, idx, vjp, None, value))
    return Tensor(value, tape, len(tape.nodes) - 1)


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return record("add", a.value + b.value, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return record("sub", a.value - b.value, (a, b),
                  lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value
    return record("mul", av * bv, (a, b),
                  lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def neg(a) -> Tensor:
    a = constant(a)
    return record("neg", -a.value, (a,), lambda g: (-g,))


def tanh(a) -> Tensor:
    a = constant(a)
    y = np.tanh(a.value)
    return record("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = constant(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return record("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a) -> Tensor:
    a = constant(a)
    mask = a.value > 0
    return record("relu", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def log_softmax(a) -> Tensor:
    """Log-softmax over the last axis."""
    a = constant(a)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    p = np.exp(y)
    return record("log_softmax", y, (a,),
                  lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


# -- linear algebra and structure ------------------------------------------


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., n) and ``b`` of shape (n, k) or (n,)."""
    a, b = constant(a), constant(b)
    if a.ndim < 1 or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.value, b.value
    n = bv.shape[0]
    out = av @ bv
    if bv.ndim == 2:
        k = bv.shape[1]

        def vjp(g):
            return g @ bv.T, av.reshape(-1, n).T @ g.reshape(-1, k)
    else:

        def vjp(g):
            return np.multiply.outer(g, bv), av.reshape(-1, n).T @ np.reshape(g, -1)

    return record("matmul", out, (a, b), vjp)


def _is_basic_index(key) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, np.integer)) or k is None or k is Ellipsis
               for k in items)


def getitem(a, key) -> Tensor:
    a = constant(a)
    try:
        out = a.value[key]
    except IndexError as exc:
        raise ShapeError("getitem", a.shape) from exc
    shape = a.shape
    basic = _is_basic_index(key)

    def vjp(g):
        full = np.zeros(shape)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return record("getitem", np.array(out, dtype=np.float64), (a,), vjp)


def embedding(table, index: int) -> Tensor:
    """Row ``index`` of ``table``."""
    table = constant(table)
    if table.ndim != 2:
        raise ShapeError("embedding", table.shape)
    if not 0 <= index < table.shape[0]:
        raise IndexError(f"embedding: index {index} outside [0, {table.shape[0]})")
    return getitem(table, int(index))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [constant(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts)) from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return record("concat", out, ts, lambda g: np.split(g, sizes, axis=axis))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [constant(t) for t in tensors]
    try:
        out = np.stack([t.value for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("stack", *(t.shape for t in ts)) from None
    return record("stack", out, ts,
                  lambda g: [np.take(g, i, axis=axis) for i in range(len(ts))])


def reshape(a, shape) -> Tensor:
    a = constant(a)
    orig = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", orig, tuple(shape)) from None
    return record("reshape", out, (a,), lambda g: (g.reshape(orig),))


def sum_(a, axis=None) -> Tensor:
    a = constant(a)
    shape = a.shape
    out = np.asarray(a.value.sum(axis=axis))

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", out, (a,), vjp)


def mean(a, axis=None) -> Tensor:
    a = constant(a)
    n = a.value.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


# -- log-space helpers -------------------------------------------------------


def log_add(a: float, b: float) -> float:
    """log(exp(a) + exp(b)) with log_add(-inf, -inf) == -inf."""
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


# -- reverse sweep -----------------------------------------------------------


def backward(tape: Tape, root: Tensor) -> dict[str, Array]:
    """Gradients of scalar ``root`` with respect to every leaf on ``tape``.

    Leaves the root does not depend on get zero arrays.
    """
    if root.tape is not tape:
        raise ValueError("backward: root is not recorded on this tape")
    if root.value.ndim != 0:
        raise ShapeError("backward (root must be scalar)", root.shape)
    nodes = tape.nodes
    grads: list[Array | None] = [None] * len(nodes)
    grads[root.index] = np.ones(())
    for i in range(root.index, -1, -1):
        g = grads[i]
        node = nodes[i]
        if g is None or node.vjp is None:
            continue
        for p, pg in zip(node.parents, node.vjp(g)):
            if p is None or pg is None:
                continue
            grads[p] = pg if grads[p] is None else grads[p] + pg
    sign = -1.0 if _flip_gradient_sign else 1.0
    out = {}
    for i, node in enumerate(nodes):
        if node.name is not None:
            g = grads[i]
            out[node.name] = np.zeros_like(node.value) if g is None else sign * np.asarray(g)
    return out


def first_nonfinite(tape: Tape) -> str | None:
    """Describe the earliest tape node holding a NaN or Inf, if any."""
    for i, node in enumerate(tape.nodes):
        if node.value is not None and not np.all(np.isfinite(node.value)):
            label = node.name if node.name is not None else node.op
            return f"node {i} ({label}, shape {tuple(node.value.shape)})"
    return None


@contextlib.contextmanager
def debug_flip_gradient_sign():
    """Negative-control hook: every gradient returned by backward is negated."""
    global _flip_gradient_sign
    prev = _flip_gradient_sign
    _flip_gradient_sign = True
    try:
        yield
    finally:
        _flip_gradient_sign = prev


# -- finite-difference oracle -----------------------------------------------


@dataclass
class Probe:
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def rel_err(self) -> float:
        return abs(self.analytic - self.numeric) / max(abs(self.analytic), abs(self.numeric), 1e-8)


@dataclass
class GradCheckReport:
    probes: list[Probe]

    @property
    def max_rel_err(self) -> float:
        return max((p.rel_err for p in self.probes), default=0.0)

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def finite_diff_check(f: Callable[[dict[str, Tensor]], Tensor], params: Mapping[str, Array],
                      n_probes: int = 20, step: float = 1e-5, seed: int = 0) -> GradCheckReport:
    """Compare tape gradients of ``f`` with central differences.

    ``f`` receives a dict of tensors keyed like ``params`` and returns a scalar
    tensor.  Probe coordinates are drawn uniformly over all parameter entries.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    tape = Tape()
    out = f(tape.leaves(params))
    analytic = backward(tape, out)

    names = list(params)
    sizes = np.array([params[k].size for k in names])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    flat = rng.choice(total, size=min(n_probes, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def value_at(name, idx, delta):
        perturbed = dict(params)
        arr = params[name].copy()
        arr[idx] += delta
        perturbed[name] = arr
        return f({k: Tensor(v) for k, v in perturbed.items()}).item()

    probes = []
    for j in sorted(flat):
        which = int(np.searchsorted(offsets, j, side="right") - 1)
        name = names[which]
        idx = np.unravel_index(int(j - offsets[which]), params[name].shape)
        numeric = (value_at(name, idx, step) - value_at(name, idx, -step)) / (2 * step)
        probes.append(Probe(name, tuple(int(i) for i in idx), float(analytic[name][idx]), numeric))
    return GradCheckReport(probes)
