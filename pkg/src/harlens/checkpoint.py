"""Versioned JSON checkpoint container.

Arrays travel as base64 of little-endian bytes so float64 parameters round-trip
bit-exactly.  ``payload`` is ``"float64"`` for trained models and ``"int8"`` for
quantized ones, which additionally carry per-tensor scales and activation ranges.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from .errors import SchemaError
from .models import ModelConfig
from .params import Layer, ParamSet
from .robustness import ActRange, QuantizedModel, QuantTensor

FORMAT = "harlens-checkpoint"
VERSION = 1


def _b64(arr: np.ndarray, dtype: str) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype=dtype).tobytes()).decode("ascii")


def _unb64(text: str, dtype: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype=dtype).copy()


def _layers_doc(params: ParamSet) -> list[dict]:
    return [
        {"name": l.name, "kind": l.kind, "arrays": [{"key": k, "shape": list(a.shape)} for k, a in l.arrays.items()]}
        for l in params.layers
    ]


def _params_from_doc(layers_doc: list[dict], flat: np.ndarray) -> ParamSet:
    layers, offset = [], 0
    for ld in layers_doc:
        arrays = {}
        for ad in ld["arrays"]:
            shape = tuple(ad["shape"])
            size = int(np.prod(shape)) if shape else 1
            arrays[ad["key"]] = flat[offset:offset + size].reshape(shape).copy()
            offset += size
        layers.append(Layer(ld["name"], ld["kind"], arrays))
    if offset != flat.size:
        raise SchemaError("checkpoint payload length does not match its layer records")
    return ParamSet(layers)


def checkpoint_doc(config: ModelConfig, params: ParamSet, extra: dict | None = None) -> dict:
    return {
        "format": FORMAT,
        "version": VERSION,
        "payload": "float64",
        "model_config": config.to_dict(),
        "layers": _layers_doc(params),
        "params": _b64(params.flat(), "<f8"),
        "params_sha256": params.digest(),
        "extra": extra or {},
    }


def save_checkpoint(path, config: ModelConfig, params: ParamSet, extra: dict | None = None) -> None:
    Path(path).write_text(json.dumps(checkpoint_doc(config, params, extra), indent=1, sort_keys=True) + "\n")


def _read(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read checkpoint {path}: {exc}") from None
    if doc.get("format") != FORMAT:
        raise SchemaError(f"{path} is not a {FORMAT} file")
    if doc.get("version") != VERSION:
        raise SchemaError(f"unsupported checkpoint version {doc.get('version')}")
    return doc


def load_checkpoint(path) -> tuple[ModelConfig, ParamSet, dict]:
    doc = _read(path)
    if doc["payload"] != "float64":
        raise SchemaError(f"{path} holds a {doc['payload']} payload; use load_quantized")
    params = _params_from_doc(doc["layers"], _unb64(doc["params"], "<f8"))
    if params.digest() != doc["params_sha256"]:
        raise SchemaError(f"{path}: parameter hash mismatch")
    return ModelConfig.from_dict(doc["model_config"]), params, doc.get("extra", {})


def save_quantized(path, config: ModelConfig, qm: QuantizedModel) -> None:
    keys = sorted(qm.weights)
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "payload": "int8",
        "model_config": config.to_dict(),
        "layers": _layers_doc(qm.float_params),
        "params": _b64(qm.float_params.flat(), "<f8"),
        "int8": {
            "tensors": [
                {"layer": name, "key": key, "scale": qm.weights[(name, key)].scale, "zero_point": qm.weights[(name, key)].zero_point}
                for name, key in keys
            ],
            "data": _b64(np.concatenate([qm.weights[k].q.ravel() for k in keys]) if keys else np.zeros(0), "i1"),
            "activations": {site: [r.lo, r.hi, r.scale, r.zero_point] for site, r in sorted(qm.activations.items())},
            "calibration_size": qm.calibration_size,
            "quantize_activations": qm.quantize_activations,
        },
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_quantized(path) -> tuple[ModelConfig, QuantizedModel]:
    doc = _read(path)
    if doc["payload"] != "int8":
        raise SchemaError(f"{path} does not hold an int8 payload")
    float_params = _params_from_doc(doc["layers"], _unb64(doc["params"], "<f8"))
    q8 = doc["int8"]
    data = _unb64(q8["data"], "i1")
    weights, offset = {}, 0
    for t in q8["tensors"]:
        shape = float_params.layer(t["layer"]).arrays[t["key"]].shape
        size = int(np.prod(shape))
        weights[(t["layer"], t["key"])] = QuantTensor(data[offset:offset + size].reshape(shape).copy(), t["scale"], t["zero_point"])
        offset += size
    acts = {site: ActRange(lo, hi, scale, int(zp)) for site, (lo, hi, scale, zp) in q8["activations"].items()}
    qm = QuantizedModel(weights, float_params, acts, q8["calibration_size"], q8["quantize_activations"])
    return ModelConfig.from_dict(doc["model_config"]), qm
