"""Adam, the SAM gradient, and the bounded-epoch training loop."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .autodiff.derivatives import Batch, value_and_gradient
from .data import WindowSet
from .errors import ConfigError, HarlensError
from .metrics import weighted_f1_score
from .models import Model, predict
from .params import ParamSet

log = logging.getLogger(__name__)


class NonFiniteGradientError(HarlensError, ArithmeticError):
    pass


@dataclass(frozen=True)
class AdamState:
    t: int
    m: ParamSet
    v: ParamSet
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: ParamSet, **hyper) -> "AdamState":
        zeros = params.zeros_like()
        return cls(0, zeros, zeros, **hyper)


def adam_step(state: AdamState, params: ParamSet, grads: ParamSet) -> tuple[ParamSet, AdamState]:
    params.check_congruent(grads, "gradient")
    g = grads.flat()
    if not np.all(np.isfinite(g)):
        bad = np.flatnonzero(~np.isfinite(g))
        raise NonFiniteGradientError(f"{bad.size} non-finite gradient entries (first at flat index {bad[0]})")
    t = state.t + 1
    m = state.beta1 * state.m.flat() + (1.0 - state.beta1) * g
    v = state.beta2 * state.v.flat() + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    theta = params.flat() - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = replace(state, t=t, m=params.with_flat(m), v=params.with_flat(v))
    return params.with_flat(theta), new_state


@dataclass(frozen=True)
class SamConfig:
    rho: float = 0.05
    grad_norm_floor: float = 1e-12

    def __post_init__(self):
        if self.rho < 0:
            raise ConfigError("SAM rho must be non-negative")


def sam_perturbation(grads: ParamSet, cfg: SamConfig) -> ParamSet | None:
    """``rho * g / ||g||``, or None when ``||g||`` is below the floor."""
    norm = grads.norm()
    if norm < cfg.grad_norm_floor:
        return None
    return grads.with_flat(grads.flat() * (cfg.rho / norm))


def sam_value_and_gradient(model: Model, batch: Batch, params: ParamSet, cfg: SamConfig) -> tuple[float, ParamSet]:
    """Loss at ``params`` and the gradient evaluated at the SAM ascent point."""
    loss, g0 = value_and_gradient(model, batch, params)
    eps = sam_perturbation(g0, cfg)
    if eps is None:
        return loss, g0
    _, g_sam = value_and_gradient(model, batch, params.with_flat(params.flat() + eps.flat()))
    return loss, g_sam


def sam_gradient(model: Model, batch: Batch, params: ParamSet, cfg: SamConfig) -> ParamSet:
    return sam_value_and_gradient(model, batch, params, cfg)[1]


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "adam"  # adam | sam
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rho: float = 0.05

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}; expected 'adam' or 'sam'")
        SamConfig(self.rho)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_fw: float


@dataclass
class TrainResult:
    params: ParamSet
    history: list[EpochRecord]
    best_epoch: int
    steps: int = 0

    def history_csv(self) -> str:
        return history_csv(self.history)


def history_csv(history: list[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_Fw"])
    for r in history:
        w.writerow([r.epoch, repr(r.train_loss), repr(r.val_fw)])
    return buf.getvalue()


def evaluate_fw(model: Model, params: ParamSet, ws: WindowSet) -> float:
    preds = predict(model, params, ws.X).argmax(axis=1)
    return weighted_f1_score(preds, ws.y, model.num_classes)


def train(model: Model, params: ParamSet, train_set: WindowSet, val_set: WindowSet | None, cfg: TrainConfig) -> TrainResult:
    """Seeded mini-batch training; returns the parameters of the best validation epoch.

    Without a validation set the last epoch is kept.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.init(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    sam = SamConfig(cfg.rho) if cfg.optimizer == "sam" else None
    history: list[EpochRecord] = []
    best = (-math.inf, 0, params)
    steps = 0
    n = len(train_set)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = Batch(train_set.X[idx], train_set.y[idx])
            if sam is None:
                loss, grads = value_and_gradient(model, batch, params)
            else:
                loss, grads = sam_value_and_gradient(model, batch, params, sam)
            params, state = adam_step(state, params, grads)
            total += loss * len(idx)
            steps += 1
        val_fw = evaluate_fw(model, params, val_set) if val_set is not None and len(val_set) else float("nan")
        history.append(EpochRecord(epoch, total / n, val_fw))
        log.info("epoch %d loss %.5f val_Fw %.4f", epoch, total / n, val_fw)
        score = val_fw if not math.isnan(val_fw) else -math.inf
        if score > best[0] or val_set is None or not len(val_set):
            best = (score, epoch, params)
    return TrainResult(best[2], history, best[1], steps)
