"""Hessian eigenvalue density by stochastic Lanczos quadrature.

Each probe runs Lanczos from a normalized Rademacher vector.  The tridiagonal
matrix's eigenvalues (Ritz values) are quadrature nodes and the squared first
components of its eigenvectors are the weights.  Averaging the Gaussian-smeared
node sets over probes estimates the spectral density.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.linalg import eigh_tridiagonal
from scipy.special import ndtr

from .autodiff.derivatives import Batch, hvp
from .params import ParamSet

BETA_TOL = 1e-12


@dataclass(frozen=True)
class HessianConfig:
    order: int = 50
    probes: int = 10
    grid_points: int = 1001
    bounds: tuple[float, float] | None = None
    sigma: float | None = None  # None: max(1e-5 * spectral range, 1e-5)

    def __post_init__(self):
        if self.order < 1 or self.probes < 1 or self.grid_points < 2:
            raise ValueError("order, probes must be >= 1 and grid_points >= 2")
        if self.sigma is not None and self.sigma <= 0:
            raise ValueError("sigma must be positive")


@dataclass(frozen=True)
class LanczosResult:
    alpha: np.ndarray
    beta: np.ndarray
    seed: int
    n: int
    terminated_at: int | None = None  # step at which beta underflowed

    @property
    def steps(self) -> int:
        return self.alpha.size

    def ritz(self) -> tuple[np.ndarray, np.ndarray]:
        """Ritz values and their quadrature weights (summing to one)."""
        if self.alpha.size == 1:
            return self.alpha.copy(), np.ones(1)
        vals, vecs = eigh_tridiagonal(self.alpha, self.beta)
        return vals, vecs[0] ** 2


def lanczos(matvec: Callable[[np.ndarray], np.ndarray], n: int, order: int, seed: int) -> LanczosResult:
    """``order`` Lanczos steps with full reorthogonalization from a Rademacher start."""
    if order < 1 or order > n:
        raise ValueError(f"order must lie in [1, n={n}], got {order}")
    rng = np.random.default_rng(seed)
    v = rng.choice([-1.0, 1.0], size=n) / np.sqrt(n)
    basis = np.zeros((order, n))
    alpha, beta = [], []
    terminated = None
    for k in range(order):
        basis[k] = v
        w = np.asarray(matvec(v), dtype=np.float64)
        a = float(w @ v)
        alpha.append(a)
        w = w - a * v
        if k > 0:
            w = w - beta[-1] * basis[k - 1]
        q = basis[: k + 1]
        for _ in range(2):
            w = w - q.T @ (q @ w)
        if k == order - 1:
            break
        b = float(np.linalg.norm(w))
        if b < BETA_TOL:
            terminated = k + 1
            break
        beta.append(b)
        v = w / b
    return LanczosResult(np.array(alpha), np.array(beta), seed, n, terminated)


@dataclass
class SpectralDensity:
    grid: np.ndarray
    values: np.ndarray
    nodes: list[np.ndarray]
    weights: list[np.ndarray]
    sigma: float
    n: int
    meta: dict = field(default_factory=dict)

    def integral(self) -> float:
        return float(np.sum(self.values) * (self.grid[1] - self.grid[0]))


def _default_sigma(spread: float) -> float:
    return max(1e-5 * spread, 1e-5)


def density(results: list[LanczosResult], cfg: HessianConfig = HessianConfig()) -> SpectralDensity:
    """Average over probes of Gaussian-smeared, weight-scaled Ritz spikes.

    Grid values are the kernel mass in each cell divided by the cell width, so
    the Riemann sum integrates to one even when the kernel is narrower than a
    cell.
    """
    if not results:
        raise ValueError("need at least one Lanczos result")
    nodes, weights = zip(*(r.ritz() for r in results))
    allnodes = np.concatenate(nodes)
    lo, hi = float(allnodes.min()), float(allnodes.max())
    sigma = cfg.sigma if cfg.sigma is not None else _default_sigma(hi - lo)
    if cfg.bounds is not None:
        g_lo, g_hi = cfg.bounds
    else:
        pad = max(0.05 * (hi - lo), 10.0 * sigma)
        g_lo, g_hi = lo - pad, hi + pad
    grid = np.linspace(g_lo, g_hi, cfg.grid_points)
    width = grid[1] - grid[0]
    edges = np.concatenate([grid - width / 2, [grid[-1] + width / 2]])
    values = np.zeros(grid.size)
    for nd, wt in zip(nodes, weights):
        cdf = ndtr((edges[None, :] - nd[:, None]) / sigma)
        values += wt @ np.diff(cdf, axis=1)
    values /= len(results) * width
    meta = {"order": int(max(r.steps for r in results)), "probes": len(results), "seeds": [r.seed for r in results]}
    return SpectralDensity(grid, values, list(nodes), list(weights), sigma, results[0].n, meta)


@dataclass(frozen=True)
class SharpnessSummary:
    lambda_max: float
    lambda_min: float
    trace: float
    negative_mass: float

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in self.__dict__.items()}


def sharpness_summary(sd: SpectralDensity) -> SharpnessSummary:
    """Extreme Ritz values, trace, and the density mass below zero.

    The trace is ``n`` times the mean of ``sum(w * node)``, which equals
    ``n`` times the first moment of the smeared density.
    """
    lam_max = max(float(nd.max()) for nd in sd.nodes)
    lam_min = min(float(nd.min()) for nd in sd.nodes)
    first_moment = float(np.mean([float(w @ nd) for nd, w in zip(sd.nodes, sd.weights)]))
    neg = np.mean([float(w @ ndtr(-nd / sd.sigma)) for nd, w in zip(sd.nodes, sd.weights)])
    return SharpnessSummary(lam_max, lam_min, sd.n * first_moment, float(neg))


def hessian_spectrum(model, params: ParamSet, batch: Batch, cfg: HessianConfig = HessianConfig(), seed: int = 0) -> SpectralDensity:
    """Spectral density of the loss Hessian at ``params`` on ``batch``."""

    def matvec(x: np.ndarray) -> np.ndarray:
        return hvp(model, batch, params, params.with_flat(x)).flat()

    order = min(cfg.order, params.n)
    seeds = np.random.SeedSequence(seed).generate_state(cfg.probes)
    results = [lanczos(matvec, params.n, order, int(s)) for s in seeds]
    return density(results, cfg)


def write_spectrum(sd: SpectralDensity, csv_path, json_path, extra: dict | None = None) -> dict:
    with Path(csv_path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda", "density"])
        for lam, val in zip(sd.grid, sd.values):
            w.writerow([repr(float(lam)), repr(float(val))])
    summary = sharpness_summary(sd).to_dict()
    summary.update(sd.meta)
    summary["sigma"] = sd.sigma
    summary["n"] = sd.n
    if extra:
        summary.update(extra)
    Path(json_path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
