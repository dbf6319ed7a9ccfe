"""Small reverse-mode autodiff on top of numpy.

Every operation returns a new :class:`Tensor` whose value array is read-only,
together with a closure that maps the output gradient to parent gradients and
a closure that recomputes the value from the parent values (used by
:class:`ComputationRecord` to replay a graph).
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class DivergenceError(NumericError):
    """Non-finite loss or gradient during training."""

    def __init__(self, message: str, step: int, breakdown: dict | None = None):
        super().__init__(f"{message} at step {step}")
        self.step = step
        self.breakdown = dict(breakdown or {})


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward", "_forward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._forward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(value, requires_grad: bool = False) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, requires_grad)


def constant(value) -> Tensor:
    return Tensor(value.data if isinstance(value, Tensor) else value)


def _make(value: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn, forward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _frozen(np.asarray(value, dtype=np.float64))
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out.op = op
    out.parents = tuple(parents)
    out._backward = backward_fn if out.requires_grad else None
    out._forward = forward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast(a, b, "add")
    return _make(
        a.data + b.data, "add", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        lambda x, y: x + y,
    )


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(
        a.data - b.data, "sub", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        lambda x, y: x - y,
    )


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.data, b.data
    return _make(
        av * bv, "mul", (a, b),
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
        lambda x, y: x * y,
    )


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast(a, b, "div")
    av, bv = a.data, b.data
    return _make(
        av / bv, "div", (a, b),
        lambda g: (_unbroadcast(g / bv, a.shape), _unbroadcast(-g * av / (bv * bv), b.shape)),
        lambda x, y: x / y,
    )


def scale(a, factor: float) -> Tensor:
    a = tensor(a)
    factor = float(factor)
    return _make(a.data * factor, "scale", (a,), lambda g: (g * factor,), lambda x: x * factor)


def exp(a) -> Tensor:
    a = tensor(a)
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,), np.exp)


def silu(a) -> Tensor:
    a = tensor(a)
    x = a.data
    s = expit(x)
    return _make(
        x * s, "silu", (a,),
        lambda g: (g * (s + x * s * (1.0 - s)),),
        lambda v: v * expit(v),
    )


def relu(a) -> Tensor:
    a = tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,), lambda v: np.where(v > 0, v, 0.0))


def square(a) -> Tensor:
    a = tensor(a)
    x = a.data
    return _make(x * x, "square", (a,), lambda g: (2.0 * g * x,), lambda v: v * v)


# ---------------------------------------------------------------------------
# linear algebra and shape

def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    av, bv = a.data, b.data

    def _bw(g):
        return (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None)

    return _make(av @ bv, "matmul", (a, b), _bw, lambda x, y: x @ y)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from None
    src = a.shape
    return _make(out, "reshape", (a,), lambda g: (g.reshape(src),), lambda x: x.reshape(shape))


def take_rows(a, index) -> Tensor:
    """Row gather ``a[index]``; used for embedding tables."""
    a = tensor(a)
    index = np.asarray(index, dtype=np.intp)

    def _bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], "take_rows", (a,), _bw, lambda x: x[index])


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    ts = tuple(tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(
        out, "concat", ts,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
        lambda *xs: np.concatenate(xs, axis=axis),
    )


# ---------------------------------------------------------------------------
# reductions

def _check_axis(a: Tensor, axis, op: str):
    if axis is None:
        return
    if not -a.data.ndim <= axis < a.data.ndim:
        raise DimensionError(f"{op}: axis {axis} invalid for shape {a.shape}")


def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = tensor(a)
    _check_axis(a, axis, "sum")
    shape = a.shape

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), "sum", (a,), _bw,
                 lambda x: x.sum(axis=axis, keepdims=keepdims))


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    _check_axis(a, axis, "mean")
    count = a.data.size if axis is None else a.shape[axis]
    shape = a.shape

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), "mean", (a,), _bw,
                 lambda x: x.mean(axis=axis, keepdims=keepdims))


def l2_norm(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Euclidean norm; the gradient at a zero vector is defined as zero."""
    a = tensor(a)
    _check_axis(a, axis, "l2_norm")
    x = a.data

    def _fwd(v):
        return np.sqrt((v * v).sum(axis=axis, keepdims=keepdims))

    out = _fwd(x)

    def _bw(g):
        n = np.sqrt((x * x).sum(axis=axis, keepdims=True))
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        elif axis is None:
            g = np.reshape(g, (1,) * x.ndim)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, g * x / safe, 0.0),)

    return _make(out, "l2_norm", (a,), _bw, _fwd)


def pairwise_distance(a, b) -> Tensor:
    """Matrix of Euclidean distances ``D[i, j] = ||a_i - b_j||``.

    Coincident pairs get a zero subgradient, matching :func:`l2_norm`.
    """
    a, b = tensor(a), tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"pairwise_distance: shapes {a.shape} and {b.shape} disagree")

    def _fwd(x, y):
        diff = x[:, None, :] - y[None, :, :]
        return np.sqrt((diff * diff).sum(axis=2))

    av, bv = a.data, b.data
    dist = _fwd(av, bv)

    def _bw(g):
        diff = av[:, None, :] - bv[None, :, :]
        w = np.where(dist > 0, g / np.where(dist > 0, dist, 1.0), 0.0)
        ga = (w[:, :, None] * diff).sum(axis=1)
        gb = -(w[:, :, None] * diff).sum(axis=0)
        return ga, gb

    return _make(dist, "pairwise_distance", (a, b), _bw, _fwd)


def stop_gradient(t) -> Tensor:
    """Value-identical copy that is cut off from the graph."""
    t = tensor(t)
    return Tensor(t.data.copy(), requires_grad=False)


# ---------------------------------------------------------------------------
# reverse pass

def topological_order(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if node.is_leaf:
            node.grad = node.grad + g if node.grad is not None else g.copy()
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


class ComputationRecord:
    """Topologically ordered view of the graph that produced ``root``."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = topological_order(root)

    def __len__(self) -> int:
        return len(self.nodes)

    def operations(self) -> list[str]:
        return [n.op for n in self.nodes if not n.is_leaf]

    def is_topological(self) -> bool:
        position = {id(n): i for i, n in enumerate(self.nodes)}
        return all(position[id(p)] < position[id(n)] for n in self.nodes for p in n.parents)

    def replay(self) -> bool:
        """Recompute every op from its parents and compare bit-for-bit."""
        values: dict[int, np.ndarray] = {}
        for n in self.nodes:
            if n.is_leaf:
                values[id(n)] = n.data
                continue
            v = np.asarray(n._forward(*(values[id(p)] for p in n.parents)), dtype=np.float64)
            if v.shape != n.data.shape or not np.array_equal(v, n.data):
                return False
            values[id(n)] = v
        return True


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-6,
    floor: float = 1e-8,
    indices: Iterable[int] | None = None,
) -> float:
    """Max relative deviation between reverse-mode and central-difference gradients.

    The deviation for entry ``i`` is ``|g_fd - g| / max(|g|, floor)`` with ``g`` the
    reverse-mode gradient. ``indices`` restricts the check to flat positions.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    base = np.array(tensor(x).data, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    if not np.all(np.isfinite(out.data)):
        raise NumericError("function value is not finite")
    backward(out)
    analytic = probe.grad.reshape(-1)
    if not np.all(np.isfinite(analytic)):
        raise NumericError("reverse-mode gradient is not finite")

    flat = base.reshape(-1)
    positions = range(flat.size) if indices is None else list(indices)
    worst = 0.0
    for i in positions:
        hi = flat.copy()
        lo = flat.copy()
        hi[i] += eps
        lo[i] -= eps
        fh = f(Tensor(hi.reshape(base.shape))).item()
        fl = f(Tensor(lo.reshape(base.shape))).item()
        if not (np.isfinite(fh) and np.isfinite(fl)):
            raise NumericError(f"non-finite function value at perturbed entry {i}")
        numeric = (fh - fl) / (2.0 * eps)
        err = abs(numeric - analytic[i]) / max(abs(analytic[i]), floor)
        worst = max(worst, err)
    return worst
