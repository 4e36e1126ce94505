"""YAML experiment configuration with paper-protocol defaults."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass
from pathlib import Path

import yaml

from .data import TABLE1
from .errors import ConfigError
from .models import ARCHITECTURES, ModelConfig
from .optim import TrainConfig

DEFAULTS: dict = {
    "seed": 0,
    "output_dir": "runs/default",
    "dataset": {
        "kind": "synthetic",
        "preset": None,
        "window": 32,
        "overlap": 16,
        "num_classes": None,
        "synthetic": {"n_classes": 8, "n_channels": 6, "n_windows_per_class": 60, "noise": 0.5},
        "csv": {
            "files": [],
            "label_column": "label",
            "channels": None,
            "subject_column": None,
            "sample_rate_hz": 33.0,
            "fractions": [0.7, 0.15, 0.15],
        },
    },
    "model": {
        "arch": "mlp",
        "hidden": [64],
        "conv_channels": [16, 16],
        "kernel_size": 5,
        "patch": None,
        "dim": 32,
        "heads": 2,
        "depth": 2,
        "mlp_ratio": 2,
        "activation": None,
        "loss": "cross_entropy",
    },
    "train": {
        "optimizer": "adam",
        "max_epochs": 20,
        "batch_size": 32,
        "lr": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "rho": 0.05,
    },
    "analysis": {
        "landscape": {"enabled": True, "range_min": -3.0, "range_max": 3.0, "step": 0.2, "batch_size": 256, "direction_mean": 0.0},
        "hessian": {"enabled": True, "order": 50, "probes": 10, "grid_points": 1001, "sigma": None, "batch_size": 256},
        "fgsm": {"enabled": True, "eps": 0.01},
        "quantize": {"enabled": True, "calibration_size": 256, "activations": True},
    },
}


def derive_seed(master: int, name: str) -> int:
    """Stable 32-bit sub-seed for a named consumer of randomness."""
    digest = hashlib.sha256(f"{master}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{where}' must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    """``a.b.c=value`` with the value parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    return key.strip().split("."), yaml.safe_load(raw)


def _nest(path: list[str], value) -> dict:
    out: dict = {}
    cur = out
    for part in path[:-1]:
        cur = cur.setdefault(part, {})
    cur[path[-1]] = value
    return out


@dataclass
class ExperimentConfig:
    raw: dict
    base_dir: Path

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["output_dir"])

    def sub_seed(self, name: str) -> int:
        return derive_seed(self.seed, name)

    @property
    def window(self) -> tuple[int, int]:
        ds = self.raw["dataset"]
        if ds["preset"]:
            p = TABLE1[ds["preset"]]
            return p["window"], p["overlap"]
        return int(ds["window"]), int(ds["overlap"])

    def model_config(self, input_shape: tuple[int, int], num_classes: int) -> ModelConfig:
        m = dict(self.raw["model"])
        return ModelConfig(input_shape=tuple(input_shape), num_classes=num_classes, seed=self.sub_seed("model.init"), **m)

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.sub_seed("train.shuffle"), **self.raw["train"])

    def analysis(self, name: str) -> dict:
        return self.raw["analysis"][name]

    def dump(self) -> str:
        """YAML of the merged config; CSV paths are made absolute so the dump loads from anywhere."""
        raw = copy.deepcopy(self.raw)
        files = raw["dataset"]["csv"]["files"]
        for i, entry in enumerate(files):
            if isinstance(entry, str):
                files[i] = str((self.base_dir / entry).resolve())
            else:
                entry["path"] = str((self.base_dir / entry["path"]).resolve())
        return yaml.safe_dump(raw, sort_keys=True)


def _validate(cfg: dict, base_dir: Path) -> None:
    ds = cfg["dataset"]
    if ds["kind"] not in ("synthetic", "csv"):
        raise ConfigError(f"dataset.kind must be 'synthetic' or 'csv', got {ds['kind']!r}")
    if ds["preset"] is not None and ds["preset"] not in TABLE1:
        raise ConfigError(f"unknown dataset preset {ds['preset']!r}; expected one of {sorted(TABLE1)}")
    if ds["kind"] == "csv":
        files = ds["csv"]["files"]
        if not files:
            raise ConfigError("dataset.csv.files is empty")
        for entry in files:
            entry = {"path": entry} if isinstance(entry, str) else entry
            path = base_dir / entry["path"]
            if not path.is_file():
                raise ConfigError(f"dataset file not found: {path}")
            if entry.get("split") not in (None, "train", "val", "test"):
                raise ConfigError(f"invalid split {entry.get('split')!r} for {path}")
    if cfg["model"]["arch"] not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture {cfg['model']['arch']!r}; expected one of {ARCHITECTURES}")
    TrainConfig(**cfg["train"])


def load_config(path=None, overrides: list[str] | None = None, base: dict | None = None) -> ExperimentConfig:
    """Defaults, then the YAML file at ``path``, then ``key=value`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    base_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path} must contain a mapping")
        cfg = _merge(cfg, loaded)
        base_dir = path.resolve().parent
    if base:
        cfg = _merge(cfg, base)
    for text in overrides or ():
        keys, value = parse_override(text)
        cfg = _merge(cfg, _nest(keys, value))
    _validate(cfg, base_dir)
    return ExperimentConfig(cfg, base_dir)
