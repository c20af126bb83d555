"""Dense float64 arithmetic with a dynamically recorded reverse-mode graph.

Values are plain ``numpy`` arrays; :class:`Tensor` wraps one together with
its gradient and the closure that pushes gradients to its parents.  Only the
operations the model needs are provided.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError

DTYPE = np.float64


class Tensor:
    """A node of the recorded computation graph."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "requires_grad")

    def __init__(self, value, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in self.parents)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def item(self) -> float:
        return float(self.value)

    def backward(self):
        """Populate ``grad`` on every reachable node from this scalar root."""
        if self.value.size != 1:
            raise ContractError(f"backward() needs a scalar root, got shape {self.shape}")
        order = _topological_order(self)
        for node in order:
            if node is not self and node.parents:
                node.grad = None
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node.backward_fn is None or node.grad is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.value.shape:
                    raise ShapeError(
                        f"{node.op}: gradient shape {g.shape} != value shape {parent.value.shape}"
                    )
                parent.grad = g if parent.grad is None else parent.grad + g

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value) -> Tensor:
    return Tensor(np.array(value, dtype=DTYPE), requires_grad=True)


def make_node(value, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Record a custom differentiable operation.

    ``backward_fn`` receives the output gradient and returns one gradient (or
    ``None``) per parent.
    """
    return Tensor(value, parents=parents, backward_fn=backward_fn, op=op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_node(
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
        "mul",
    )


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return make_node(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,), "relu")


def square(x: Tensor) -> Tensor:
    return make_node(x.value * x.value, (x,), lambda g: (2.0 * x.value * g,), "square")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.value)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


# shape ---------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    return make_node(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)
    return make_node(
        np.transpose(x.value, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose"
    )


def getitem(x: Tensor, index) -> Tensor:
    def backward(g):
        out = np.zeros_like(x.value)
        np.add.at(out, index, g)
        return (out,)

    return make_node(x.value[index], (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return make_node(
        np.concatenate([t.value for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


# reductions ----------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    return make_node(x.value.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        axis = tuple(range(x.value.ndim))
    axis = (axis,) if isinstance(axis, int) else tuple(axis)
    count = int(np.prod([x.shape[a] for a in axis]))

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape) / count,)

    return make_node(x.value.mean(axis=axis), (x,), backward, "mean")


# linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    return make_node(
        a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g), "matmul"
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for a (batch, in) input and (out, in) weight."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight fan-in {weight.shape[1]}")
    xv, wv = x.value, weight.value
    out = xv @ wv.T
    if bias is not None:
        out = out + bias.value

    def backward(g):
        grads = [g @ wv, g.T @ xv]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, backward, "linear")


# softmax family ------------------------------------------------------------

def _check_vector(v) -> np.ndarray:
    v = np.asarray(v, dtype=DTYPE)
    if v.size == 0:
        raise DomainError("empty vector")
    if not np.all(np.isfinite(v)):
        raise DomainError("non-finite input")
    return v


def logsumexp(v, epsilon: float = 1.0) -> float:
    """``epsilon * log(sum(exp(v / epsilon)))`` evaluated with max subtraction."""
    if not epsilon > 0:
        raise DomainError(f"epsilon must be positive, got {epsilon}")
    v = _check_vector(v).ravel()
    m = v.max()
    return float(m + epsilon * math.log(np.exp((v - m) / epsilon).sum()))


def softmax(v) -> np.ndarray:
    v = _check_vector(v)
    z = np.exp(v - v.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, target_index: int) -> float:
    v = _check_vector(logits).ravel()
    if not 0 <= target_index < v.size:
        raise ContractError(f"target index {target_index} outside [0, {v.size})")
    return logsumexp(v) - float(v[target_index])


def logsumexp_rows(x: Tensor, epsilon: float = 1.0) -> Tensor:
    """Row-wise tempered logsumexp of a (batch, n) tensor."""
    if not epsilon > 0:
        raise DomainError(f"epsilon must be positive, got {epsilon}")
    v = x.value
    m = v.max(axis=1, keepdims=True)
    z = np.exp((v - m) / epsilon)
    s = z.sum(axis=1, keepdims=True)
    out = (m + epsilon * np.log(s))[:, 0]
    probs = z / s
    return make_node(out, (x,), lambda g: (g[:, None] * probs,), "logsumexp")


def cross_entropy_rows(logits: Tensor, targets) -> Tensor:
    """Per-sample softmax cross entropy of (batch, n) logits against integer targets."""
    targets = np.asarray(targets, dtype=np.int64)
    v = logits.value
    if targets.shape != (v.shape[0],):
        raise ShapeError(f"targets shape {targets.shape} != ({v.shape[0]},)")
    if targets.size and (targets.min() < 0 or targets.max() >= v.shape[1]):
        raise ContractError("target index out of range")
    m = v.max(axis=1, keepdims=True)
    z = np.exp(v - m)
    s = z.sum(axis=1, keepdims=True)
    rows = np.arange(v.shape[0])
    out = (m[:, 0] + np.log(s[:, 0])) - v[rows, targets]
    probs = z / s

    def backward(g):
        d = probs.copy()
        d[rows, targets] -= 1.0
        return (g[:, None] * d,)

    return make_node(out, (logits,), backward, "cross_entropy")


# gradient checking ---------------------------------------------------------

def check_gradient(
    fn: Callable[[], Tensor],
    params: Tensor | Iterable[Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    floor: float = 1e-6,
) -> tuple:
    """Compare reverse-mode gradients of ``fn()`` with central differences.

    ``fn`` rebuilds the graph from the current parameter values on each call.
    The relative error of an entry is ``|a - n| / max(|a|, |n|, floor)``.
    Returns ``(passed, max_relative_error)``.
    """
    params = [params] if isinstance(params, Tensor) else list(params)
    root = fn()
    if root.value.size != 1:
        raise ContractError(f"check_gradient needs a scalar root, got shape {root.shape}")
    for p in params:
        p.grad = None
    root.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.value) if p.grad is None else p.grad.copy()
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            f_plus = fn().item()
            flat[i] = saved - step
            f_minus = fn().item()
            flat[i] = saved
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst <= tolerance, worst
