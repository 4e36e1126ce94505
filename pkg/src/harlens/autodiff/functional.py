"""Composite differentiable functions built from the primitive ops."""

from __future__ import annotations

import math

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, exp, log, matmul, mul, power, relu, sum_, swap_last, tanh

_GELU_C = math.sqrt(2.0 / math.pi)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    out = matmul(x, swap_last(weight))
    return out if bias is None else out + bias


def gelu(x: Tensor) -> Tensor:
    inner = mul(_GELU_C, x + mul(0.044715, power(x, 3.0)))
    return mul(0.5, x) * (1.0 + tanh(inner))


ACTIVATIONS = {"relu": relu, "tanh": tanh, "gelu": gelu}


def _stable_max(x: Tensor, axis: int) -> Tensor:
    # constant shift; the result is invariant to it so no gradient is needed
    return Tensor(np.max(x.data, axis=axis, keepdims=True))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x - _stable_max(x, axis)
    return z - log(sum_(exp(z), axis, keepdims=True))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    e = exp(x - _stable_max(x, axis))
    return e / sum_(e, axis, keepdims=True)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _check_labels(logits: Tensor, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("loss", f"logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    return labels


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over the batch."""
    labels = _check_labels(logits, labels)
    picked = sum_(log_softmax(logits, -1) * Tensor(one_hot(labels, logits.shape[1])))
    return mul(picked, -1.0 / logits.shape[0])


def mse(outputs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of the squared error against one-hot targets."""
    labels = _check_labels(outputs, labels)
    diff = outputs - Tensor(one_hot(labels, outputs.shape[1]))
    return mul(sum_(diff * diff), 1.0 / outputs.shape[0])


LOSSES = {"cross_entropy": cross_entropy, "mse": mse}


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    n = x.shape[-1]
    mu = mul(sum_(x, -1, keepdims=True), 1.0 / n)
    xc = x - mu
    var = mul(sum_(xc * xc, -1, keepdims=True), 1.0 / n)
    return xc * power(var + eps, -0.5) * gain + shift
