"""Tape-free reverse-mode autodiff over dense float64 arrays.

Every backward rule is written with the same differentiable operations as the
forward pass, so gradients computed with ``create_graph=True`` can themselves be
differentiated.  That is what makes exact Hessian-vector products possible.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import NumericOverflowError, ShapeError

_local = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording parents; results are constants."""
    prev = is_grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


@contextlib.contextmanager
def enable_grad():
    prev = is_grad_enabled()
    _local.enabled = True
    try:
        yield
    finally:
        _local.enabled = prev


BackwardFn = Callable[["Tensor", Sequence[bool]], Sequence["Tensor | None"]]


class Tensor:
    __slots__ = ("data", "parents", "backward_fn", "op", "requires_grad")

    def __init__(
        self,
        data,
        parents: tuple["Tensor", ...] = (),
        backward_fn: BackwardFn | None = None,
        op: str = "const",
        requires_grad: bool = False,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.requires_grad = requires_grad

    @classmethod
    def variable(cls, data, name: str = "leaf") -> "Tensor":
        return cls(np.array(data, dtype=np.float64), op=name, requires_grad=True)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, op="detach")

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape})"

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return swap_last(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericOverflowError(op)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, parents, backward_fn, op, requires_grad=True)
    return Tensor(data, op=op)


def _shape_guard(op: str, fn, *arrays):
    try:
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return fn(*arrays)
    except ValueError as exc:
        raise ShapeError(op, " vs ".join(str(a.shape) for a in arrays), str(exc)) from None


# --------------------------------------------------------------------------
# broadcasting helpers


def _sum_to_shape(arr: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if arr.shape == shape:
        return arr
    lead = arr.ndim - len(shape)
    if lead > 0:
        arr = arr.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and arr.shape[i] != 1)
    if axes:
        arr = arr.sum(axis=axes, keepdims=True)
    return arr


def sum_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a

    def backward(g, needs):
        return (broadcast_to(g, a.shape),)

    return _make("sum_to", _sum_to_shape(a.data, shape), (a,), backward)


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a

    def backward(g, needs):
        return (sum_to(g, a.shape),)

    data = _shape_guard("broadcast_to", lambda x: np.broadcast_to(x, shape).copy(), a.data)
    return _make("broadcast_to", data, (a,), backward)


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, needs):
        return (
            sum_to(g, a.shape) if needs[0] else None,
            sum_to(g, b.shape) if needs[1] else None,
        )

    return _make("add", _shape_guard("add", np.add, a.data, b.data), (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, needs):
        return (
            sum_to(g, a.shape) if needs[0] else None,
            sum_to(neg(g), b.shape) if needs[1] else None,
        )

    return _make("sub", _shape_guard("sub", np.subtract, a.data, b.data), (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, needs):
        return (
            sum_to(mul(g, b), a.shape) if needs[0] else None,
            sum_to(mul(g, a), b.shape) if needs[1] else None,
        )

    return _make("mul", _shape_guard("mul", np.multiply, a.data, b.data), (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, needs):
        ga = gb = None
        if needs[0]:
            ga = sum_to(div(g, b), a.shape)
        if needs[1]:
            gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _make("div", _shape_guard("div", np.divide, a.data, b.data), (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g, needs):
        return (neg(g),)

    return _make("neg", -a.data, (a,), backward)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)

    def backward(g, needs):
        if p == 1.0:
            return (g,)
        return (mul(g, mul(p, power(a, p - 1.0))),)

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        data = np.power(a.data, p)
    return _make("pow", data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    def backward(g, needs):
        return (mul(g, out),)

    with np.errstate(over="ignore"):
        out = _make("exp", np.exp(a.data), (a,), backward)
    return out


def log(a: Tensor) -> Tensor:
    def backward(g, needs):
        return (div(g, a),)

    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return _make("log", data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    def backward(g, needs):
        return (mul(g, sub(1.0, mul(out, out))),)

    out = _make("tanh", np.tanh(a.data), (a,), backward)
    return out


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(np.float64)

    def backward(g, needs):
        return (mul(g, Tensor(mask)),)

    return _make("relu", a.data * mask, (a,), backward)


# --------------------------------------------------------------------------
# linear algebra and reductions


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", f"{a.shape} @ {b.shape}", "operands must be at least 2-D")

    def backward(g, needs):
        return (
            sum_to(matmul(g, swap_last(b)), a.shape) if needs[0] else None,
            sum_to(matmul(swap_last(a), g), b.shape) if needs[1] else None,
        )

    return _make("matmul", _shape_guard("matmul", np.matmul, a.data, b.data), (a, b), backward)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    kept_shape = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    def backward(g, needs):
        return (broadcast_to(reshape(g, kept_shape), a.shape),)

    return _make("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum_(a, axes, keepdims), 1.0 / count)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g, needs):
        return (reshape(g, a.shape),)

    data = _shape_guard("reshape", lambda x: x.reshape(shape), a.data)
    return _make("reshape", data, (a,), backward)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g, needs):
        return (transpose(g, inverse),)

    return _make("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,), backward)


def getitem(a: Tensor, key) -> Tensor:
    def backward(g, needs):
        return (scatter_add(g, key, a.shape),)

    data = _shape_guard("getitem", lambda x: np.array(x[key]), a.data)
    return _make("getitem", data, (a,), backward)


def scatter_add(g: Tensor, key, shape: tuple[int, ...]) -> Tensor:
    """Adjoint of ``getitem``: accumulate ``g`` into zeros of ``shape`` at ``key``."""

    def backward(gg, needs):
        return (getitem(gg, key),)

    out = np.zeros(shape)
    np.add.at(out, key, g.data)
    return _make("scatter_add", out, (g,), backward)


# --------------------------------------------------------------------------
# differentiation driver


def _toposort(root: Tensor) -> list[Tensor]:
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


def grad(
    output: Tensor,
    inputs: Iterable[Tensor],
    grad_output: Tensor | None = None,
    create_graph: bool = False,
) -> list[Tensor]:
    """Gradients of ``output`` with respect to each of ``inputs``.

    Inputs that ``output`` does not depend on receive exact zeros.  With
    ``create_graph=True`` the returned tensors remain attached to the graph and
    may be differentiated again.
    """
    inputs = list(inputs)
    if grad_output is None:
        if output.data.size != 1:
            raise ShapeError("grad", str(output.shape), "implicit grad_output needs a scalar output")
        grad_output = Tensor(np.ones_like(output.data))
    order = _toposort(output)
    wanted = {id(t) for t in inputs}
    needed: dict[int, bool] = {}
    for node in order:
        needed[id(node)] = id(node) in wanted or any(needed.get(id(p), False) for p in node.parents)

    grads: dict[int, Tensor] = {id(output): grad_output}
    ctx = enable_grad() if create_graph else no_grad()
    with ctx:
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node.backward_fn is None or not needed[id(node)]:
                continue
            needs = [needed.get(id(p), False) for p in node.parents]
            parent_grads = node.backward_fn(g, needs)
            for p, pg, need in zip(node.parents, parent_grads, needs):
                if not need or pg is None:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)

    return [grads.get(id(t), Tensor(np.zeros_like(t.data))) for t in inputs]
