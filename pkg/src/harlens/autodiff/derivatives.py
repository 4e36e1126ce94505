"""Loss, gradient and Hessian-vector products of a model at a parameter point."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..params import ParamSet
from .tensor import Tensor, grad, mul, no_grad, sum_


@dataclass(frozen=True)
class Batch:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "X", np.asarray(self.X, dtype=np.float64))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.int64))

    def __len__(self) -> int:
        return self.X.shape[0]


@dataclass
class Forward:
    loss: float
    node: Tensor
    leaves: list[Tensor]


def forward(model, batch: Batch, params: ParamSet, record: bool = True) -> Forward:
    """Mean batch loss; with ``record`` the graph is kept for one backward pass."""
    view, leaves = params.to_tensors(requires_grad=record)
    if record:
        node = model.loss(view, batch.X, batch.y)
    else:
        with no_grad():
            node = model.loss(view, batch.X, batch.y)
    return Forward(node.item(), node, leaves)


def loss(model, batch: Batch, params: ParamSet) -> float:
    return forward(model, batch, params, record=False).loss


def value_and_gradient(model, batch: Batch, params: ParamSet) -> tuple[float, ParamSet]:
    fwd = forward(model, batch, params)
    grads = grad(fwd.node, fwd.leaves)
    return fwd.loss, params.from_arrays([g.data for g in grads])


def gradient(model, batch: Batch, params: ParamSet) -> ParamSet:
    return value_and_gradient(model, batch, params)[1]


def hvp(model, batch: Batch, params: ParamSet, v: ParamSet) -> ParamSet:
    """Exact Hessian-vector product by differentiating ``<grad L, v>`` once more."""
    params.check_congruent(v, "hvp direction")
    fwd = forward(model, batch, params)
    grads = grad(fwd.node, fwd.leaves, create_graph=True)
    v_arrays = [a for layer in v.layers for a in layer.arrays.values()]
    inner = None
    for g, va in zip(grads, v_arrays):
        if not g.requires_grad:
            continue  # gradient constant in the parameters: contributes nothing
        term = sum_(mul(g, Tensor(va)))
        inner = term if inner is None else inner + term
    if inner is None:
        return params.zeros_like()
    hv = grad(inner, fwd.leaves)
    return params.from_arrays([t.data for t in hv])


def hvp_fd(model, batch: Batch, params: ParamSet, v: ParamSet, h: float = 1e-4) -> ParamSet:
    """Central difference of gradients; a cross-check for :func:`hvp`."""
    params.check_congruent(v, "hvp direction")
    theta, d = params.flat(), v.flat()
    g_plus = gradient(model, batch, params.with_flat(theta + h * d)).flat()
    g_minus = gradient(model, batch, params.with_flat(theta - h * d)).flat()
    return params.with_flat((g_plus - g_minus) / (2.0 * h))


def input_gradient(model, batch: Batch, params: ParamSet) -> tuple[float, np.ndarray]:
    """Mean batch loss and its gradient with respect to the input windows."""
    view, _ = params.to_tensors()
    x = Tensor.variable(batch.X, "input")
    node = model.loss(view, x, batch.y)
    (gx,) = grad(node, [x])
    return node.item(), gx.data
