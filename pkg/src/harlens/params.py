"""Structured parameter vectors.

A :class:`ParamSet` is an ordered tuple of layer records.  Gradients, Adam
moments, landscape directions and SAM perturbations all reuse the same type so
that congruence is a structural check rather than a convention.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .autodiff.tensor import Tensor
from .errors import StructureError

LAYER_KINDS = ("conv", "dense", "recurrent", "norm", "embedding")


@dataclass(frozen=True)
class Layer:
    name: str
    kind: str
    arrays: dict[str, np.ndarray]

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays.values())


class ParamSet:
    __slots__ = ("layers", "_layout")

    def __init__(self, layers):
        self.layers: tuple[Layer, ...] = tuple(layers)
        layout = []
        offset = 0
        for li, layer in enumerate(self.layers):
            for key, arr in layer.arrays.items():
                layout.append((li, key, offset, offset + arr.size, arr.shape))
                offset += arr.size
        self._layout = tuple(layout)

    # ---- structure -----------------------------------------------------

    @property
    def n(self) -> int:
        return self._layout[-1][3] if self._layout else 0

    def entries(self) -> Iterator[tuple[int, str, int, int, tuple[int, ...]]]:
        """Yield ``(layer index, key, flat start, flat stop, shape)`` in flat order."""
        return iter(self._layout)

    def signature(self) -> tuple:
        return tuple((l.name, l.kind, tuple((k, a.shape) for k, a in l.arrays.items())) for l in self.layers)

    def congruent(self, other: "ParamSet") -> bool:
        return isinstance(other, ParamSet) and self.signature() == other.signature()

    def check_congruent(self, other: "ParamSet", what: str = "vector") -> None:
        if not self.congruent(other):
            raise StructureError(f"{what} is not congruent to the parameter set")

    def layer(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    # ---- flat views ----------------------------------------------------

    def flat(self) -> np.ndarray:
        if not self.layers:
            return np.zeros(0)
        return np.concatenate([a.ravel() for l in self.layers for a in l.arrays.values()])

    def with_flat(self, vec: np.ndarray) -> "ParamSet":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n,):
            raise StructureError(f"flat vector has shape {vec.shape}, expected ({self.n},)")
        layers = []
        it = iter(self._layout)
        for layer in self.layers:
            arrays = {}
            for key in layer.arrays:
                _, _, start, stop, shape = next(it)
                arrays[key] = vec[start:stop].reshape(shape).copy()
            layers.append(Layer(layer.name, layer.kind, arrays))
        return ParamSet(layers)

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParamSet":
        return ParamSet(
            Layer(l.name, l.kind, {k: np.asarray(fn(a), dtype=np.float64) for k, a in l.arrays.items()})
            for l in self.layers
        )

    def zeros_like(self) -> "ParamSet":
        return self.map(np.zeros_like)

    def copy(self) -> "ParamSet":
        return self.map(np.array)

    def to_tensors(self, requires_grad: bool = False) -> tuple[dict[str, dict[str, Tensor]], list[Tensor]]:
        """Wrap arrays as tensors; returns the name-keyed view and the leaves in flat order."""
        view: dict[str, dict[str, Tensor]] = {}
        leaves: list[Tensor] = []
        for layer in self.layers:
            slot = {}
            for key, arr in layer.arrays.items():
                t = Tensor.variable(arr, f"{layer.name}.{key}") if requires_grad else Tensor(arr, op=f"{layer.name}.{key}")
                slot[key] = t
                leaves.append(t)
            view[layer.name] = slot
        return view, leaves

    def from_arrays(self, arrays: list[np.ndarray]) -> "ParamSet":
        """Rebuild with this structure from arrays given in flat order."""
        it = iter(arrays)
        layers = [Layer(l.name, l.kind, {k: np.asarray(next(it), dtype=np.float64) for k in l.arrays}) for l in self.layers]
        return ParamSet(layers)

    # ---- vector arithmetic ----------------------------------------------

    def __add__(self, other: "ParamSet") -> "ParamSet":
        self.check_congruent(other)
        return self.with_flat(self.flat() + other.flat())

    def __sub__(self, other: "ParamSet") -> "ParamSet":
        self.check_congruent(other)
        return self.with_flat(self.flat() - other.flat())

    def __mul__(self, scalar: float) -> "ParamSet":
        return self.with_flat(self.flat() * float(scalar))

    __rmul__ = __mul__

    def dot(self, other: "ParamSet") -> float:
        self.check_congruent(other)
        return float(self.flat() @ other.flat())

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat()))

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(repr(self.signature()).encode())
        h.update(np.ascontiguousarray(self.flat(), dtype="<f8").tobytes())
        return h.hexdigest()

    def __eq__(self, other) -> bool:
        return isinstance(other, ParamSet) and self.congruent(other) and np.array_equal(self.flat(), other.flat())

    __hash__ = None

    def __repr__(self) -> str:
        return f"ParamSet({len(self.layers)} layers, n={self.n})"


GradVector = ParamSet
Direction = ParamSet
