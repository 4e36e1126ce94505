"""FGSM input attacks and simulated int8 post-training quantization."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff.derivatives import Batch, input_gradient
from .autodiff.tensor import Tensor
from .data import WindowSet
from .metrics import weighted_f1_score
from .models import Model, is_filter_array, predict
from .params import ParamSet

QMIN, QMAX = -128, 127
SCALE_FLOOR = 1e-12
CALIBRATION_SIZE = 256


@dataclass(frozen=True)
class AdvConfig:
    eps: float = 0.01  # in normalized (standard-deviation) input units

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("FGSM eps must be non-negative")


def fgsm(model: Model, params: ParamSet, batch: Batch, cfg: AdvConfig = AdvConfig()) -> Batch:
    """One signed-gradient step of size ``eps`` on the inputs; labels unchanged."""
    if cfg.eps == 0:
        return Batch(batch.X.copy(), batch.y)
    _, gx = input_gradient(model, batch, params)
    x = batch.X
    adv = x + cfg.eps * np.sign(gx)
    # rounding of x + eps can overshoot by half an ulp; step back so |adv - x| <= eps holds in float64
    over = np.abs(adv - x) > cfg.eps
    while over.any():
        adv[over] = np.nextafter(adv[over], x[over])
        over = np.abs(adv - x) > cfg.eps
    return Batch(adv, batch.y)


def fgsm_windows(model: Model, params: ParamSet, ws: WindowSet, cfg: AdvConfig = AdvConfig(), batch_size: int = 256) -> WindowSet:
    # the sign of the mean-loss gradient is per-sample, so chunking does not change it
    chunks = [
        fgsm(model, params, Batch(ws.X[i:i + batch_size], ws.y[i:i + batch_size]), cfg).X
        for i in range(0, len(ws), batch_size)
    ]
    X = np.concatenate(chunks) if chunks else ws.X.copy()
    return WindowSet(X, ws.y, ws.num_classes, ws.window_length, ws.overlap)


# --------------------------------------------------------------------------
# quantization


@dataclass(frozen=True)
class QuantTensor:
    q: np.ndarray  # int8
    scale: float
    zero_point: int = 0

    def dequantize(self) -> np.ndarray:
        return self.scale * (self.q.astype(np.float64) - self.zero_point)


def quantize_symmetric(x: np.ndarray) -> QuantTensor:
    """Per-tensor symmetric int8: ``s = max|x| / 127``, zero point 0."""
    x = np.asarray(x, dtype=np.float64)
    scale = max(float(np.max(np.abs(x))) / QMAX if x.size else 0.0, SCALE_FLOOR)
    q = np.clip(np.round(x / scale), QMIN, QMAX).astype(np.int8)
    return QuantTensor(q, scale, 0)


def affine_params(lo: float, hi: float) -> tuple[float, int]:
    """Asymmetric per-tensor scale and zero point; the range always contains 0."""
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    scale = max((hi - lo) / (QMAX - QMIN), SCALE_FLOOR)
    zp = int(np.clip(round(QMIN - lo / scale), QMIN, QMAX))
    return scale, zp


def fake_quantize(x: np.ndarray, scale: float, zero_point: int) -> np.ndarray:
    q = np.clip(np.round(x / scale) + zero_point, QMIN, QMAX)
    return scale * (q - zero_point)


@dataclass(frozen=True)
class ActRange:
    lo: float
    hi: float
    scale: float
    zero_point: int


@dataclass
class QuantizedModel:
    weights: dict[tuple[str, str], QuantTensor]
    float_params: ParamSet  # structure plus unquantized biases / norm parameters
    activations: dict[str, ActRange]
    calibration_size: int
    quantize_activations: bool = True

    def dequantized_params(self) -> ParamSet:
        arrays = []
        for layer in self.float_params.layers:
            for key, arr in layer.arrays.items():
                qt = self.weights.get((layer.name, key))
                arrays.append(qt.dequantize() if qt is not None else arr)
        return self.float_params.from_arrays(arrays)

    def observer(self):
        if not self.quantize_activations:
            return None
        ranges = self.activations

        def observe(site: str, x: Tensor) -> Tensor:
            r = ranges.get(site)
            if r is None:
                return x
            return Tensor(fake_quantize(x.data, r.scale, r.zero_point), op=f"fq:{site}")

        return observe

    def predict(self, model: Model, X: np.ndarray) -> np.ndarray:
        return predict(model, self.dequantized_params(), X, observe=self.observer())


class _RangeObserver:
    def __init__(self):
        self.ranges: dict[str, list[float]] = {}

    def __call__(self, site: str, x: Tensor) -> Tensor:
        lo, hi = float(x.data.min()), float(x.data.max())
        r = self.ranges.get(site)
        if r is None:
            self.ranges[site] = [lo, hi]
        else:
            r[0], r[1] = min(r[0], lo), max(r[1], hi)
        return x


def calibration_subset(train: WindowSet, size: int = CALIBRATION_SIZE, seed: int = 0) -> WindowSet:
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(train), size=min(size, len(train)), replace=False))
    return train.subset(idx)


def quantize(model: Model, params: ParamSet, calibration: WindowSet, quantize_activations: bool = True) -> QuantizedModel:
    """Int8 weights plus activation ranges observed on one pass over ``calibration``.

    Filter weights are stored as int8; biases and normalization parameters
    stay in float, as int8 toolchains keep biases at higher precision.
    """
    if len(calibration) == 0:
        raise ValueError("calibration set is empty")
    weights, kept = {}, []
    for li, key, *_ in params.entries():
        layer = params.layers[li]
        arr = layer.arrays[key]
        if is_filter_array(layer.kind, arr):
            weights[(layer.name, key)] = quantize_symmetric(arr)
            kept.append(np.zeros_like(arr))  # the int8 copy is authoritative
        else:
            kept.append(arr.copy())
    qm = QuantizedModel(weights, params.from_arrays(kept), {}, len(calibration), quantize_activations)
    # ranges are observed on the weight-quantized network, which is what inference will run
    obs = _RangeObserver()
    predict(model, qm.dequantized_params(), calibration.X, observe=obs)
    qm.activations = {site: ActRange(lo, hi, *affine_params(lo, hi)) for site, (lo, hi) in obs.ranges.items()}
    return qm


@dataclass
class RobustnessReport:
    clean_fw: float
    adversarial_fw: float | None
    quantized_fw: float | None
    eps: float | None
    calibration_size: int | None
    input_units: str = "normalized (per-channel standard deviations)"
    adversarial_delta: float | None = field(init=False)
    quantized_delta: float | None = field(init=False)

    def __post_init__(self):
        self.adversarial_delta = None if self.adversarial_fw is None else self.clean_fw - self.adversarial_fw
        self.quantized_delta = None if self.quantized_fw is None else self.clean_fw - self.quantized_fw

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def evaluate_robustness(
    model: Model,
    params: ParamSet,
    qmodel: QuantizedModel | None,
    test: WindowSet,
    adv: AdvConfig | None = AdvConfig(),
) -> RobustnessReport:
    """Clean, FGSM and quantized weighted F1 on ``test``; a None config skips that arm."""
    if len(test) == 0:
        raise ValueError("test set is empty")
    k = model.num_classes

    def fw(probs):
        return weighted_f1_score(probs.argmax(axis=1), test.y, k)

    clean = fw(predict(model, params, test.X))
    adversarial = quantized = None
    if adv is not None:
        adversarial = fw(predict(model, params, fgsm_windows(model, params, test, adv).X))
    if qmodel is not None:
        quantized = fw(qmodel.predict(model, test.X))
    return RobustnessReport(
        clean,
        adversarial,
        quantized,
        adv.eps if adv is not None else None,
        qmodel.calibration_size if qmodel is not None else None,
    )
