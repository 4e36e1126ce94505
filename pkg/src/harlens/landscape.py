"""Filter-normalized two-direction loss surfaces."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff.derivatives import Batch, loss
from .data import WindowSet
from .errors import NumericOverflowError
from .models import Model, is_filter_array
from .params import ParamSet


def sample_direction(params: ParamSet, seed: int, mean: float = 0.0) -> ParamSet:
    """Gaussian entries on every filter weight, zeros on biases and norm parameters."""
    rng = np.random.default_rng(seed)
    vec = np.zeros(params.n)
    for li, key, start, stop, shape in params.entries():
        layer = params.layers[li]
        if is_filter_array(layer.kind, layer.arrays[key]):
            vec[start:stop] = rng.normal(mean, 1.0, size=stop - start)
    return params.with_flat(vec)


def normalize_direction(d: ParamSet, params: ParamSet) -> ParamSet:
    """Rescale each filter of ``d`` to the Frobenius norm of the matching filter of ``params``.

    Zero-norm filters of ``d`` stay zero; non-filter entries are forced to zero.
    """
    params.check_congruent(d, "direction")
    dv, tv = d.flat(), params.flat()
    out = np.zeros_like(dv)
    for li, key, start, stop, shape in params.entries():
        layer = params.layers[li]
        if not is_filter_array(layer.kind, layer.arrays[key]):
            continue
        drows = dv[start:stop].reshape(shape[0], -1)
        trows = tv[start:stop].reshape(shape[0], -1)
        dn = np.linalg.norm(drows, axis=1, keepdims=True)
        tn = np.linalg.norm(trows, axis=1, keepdims=True)
        scale = np.divide(tn, dn, out=np.zeros_like(dn), where=dn > 0)
        out[start:stop] = (drows * scale).ravel()
    return params.with_flat(out)


def grid_axis(lo: float, hi: float, step: float) -> np.ndarray:
    if step <= 0:
        raise ValueError("step must be positive")
    if hi < lo:
        raise ValueError("range_max must not be below range_min")
    n = int(round((hi - lo) / step)) + 1
    # rounding pins the grid to decimal values, so 0 is hit exactly
    return np.round(lo + step * np.arange(n), 12) + 0.0


@dataclass
class LandscapeGrid:
    alphas: np.ndarray
    betas: np.ndarray
    losses: np.ndarray  # (len(alphas), len(betas)), NaN where the loss was non-finite
    metadata: dict = field(default_factory=dict)

    def at(self, alpha: float, beta: float) -> float:
        i = int(np.flatnonzero(self.alphas == alpha)[0])
        j = int(np.flatnonzero(self.betas == beta)[0])
        return float(self.losses[i, j])

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["alpha\\beta", *(repr(float(b)) for b in self.betas)])
            for a, row in zip(self.alphas, self.losses):
                w.writerow([repr(float(a)), *(repr(float(v)) for v in row)])

    def write(self, csv_path, meta_path) -> None:
        self.to_csv(csv_path)
        Path(meta_path).write_text(json.dumps(self.metadata, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_csv(cls, path) -> "LandscapeGrid":
        with Path(path).open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        betas = np.array([float(b) for b in rows[0][1:]])
        alphas = np.array([float(r[0]) for r in rows[1:]])
        losses = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        return cls(alphas, betas, losses)


def fixed_batch(ws: WindowSet, size: int = 256, seed: int = 0) -> tuple[Batch, dict]:
    """Seeded subset of ``ws`` used for every perturbation of one analysis."""
    rng = np.random.default_rng(seed)
    n = len(ws)
    idx = np.sort(rng.choice(n, size=min(size, n), replace=False))
    batch_id = hashlib.sha256(idx.astype("<i8").tobytes()).hexdigest()[:16]
    return Batch(ws.X[idx], ws.y[idx]), {"batch_seed": seed, "batch_size": int(idx.size), "batch_id": batch_id}


def evaluate_grid(
    model: Model,
    params: ParamSet,
    batch: Batch,
    delta: ParamSet,
    eta: ParamSet,
    range_min: float = -3.0,
    range_max: float = 3.0,
    step: float = 0.2,
) -> LandscapeGrid:
    """Loss at ``params + a * delta + b * eta`` over the square grid of (a, b)."""
    params.check_congruent(delta, "delta")
    params.check_congruent(eta, "eta")
    alphas = grid_axis(range_min, range_max, step)
    betas = alphas.copy()
    theta, dv, ev = params.flat(), delta.flat(), eta.flat()
    losses = np.empty((alphas.size, betas.size))
    with np.errstate(all="ignore"):
        for i, a in enumerate(alphas):
            base = theta + a * dv
            for j, b in enumerate(betas):
                try:
                    losses[i, j] = loss(model, batch, params.with_flat(base + b * ev))
                except NumericOverflowError:
                    losses[i, j] = np.nan
    meta = {
        "range_min": range_min,
        "range_max": range_max,
        "step": step,
        "points_per_axis": int(alphas.size),
        "model_hash": params.digest(),
        "non_finite_cells": int(np.count_nonzero(~np.isfinite(losses))),
    }
    return LandscapeGrid(alphas, betas, losses, meta)
