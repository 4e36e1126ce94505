"""Model zoo: MLP, 1-D CNN, a small ViT-style encoder, and a linear probe.

Weights of every dense, conv, recurrent and embedding layer are stored with the
filter (output unit) on axis 0, so a filter is always one leading-axis slice.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .autodiff import functional as F
from .autodiff.tensor import Tensor, getitem, mean, no_grad, reshape, transpose
from .errors import ConfigError, ShapeError
from .params import Layer, ParamSet

Observer = Callable[[str, Tensor], Tensor]

ARCHITECTURES = ("mlp", "conv", "transformer", "linear")
FILTER_KINDS = ("conv", "dense", "recurrent", "embedding")


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "mlp"
    input_shape: tuple[int, int] = (32, 6)
    num_classes: int = 8
    hidden: tuple[int, ...] = (64,)
    conv_channels: tuple[int, ...] = (16, 16)
    kernel_size: int = 5
    patch: tuple[int, int] | None = None
    dim: int = 32
    heads: int = 2
    depth: int = 2
    mlp_ratio: int = 2
    activation: str | None = None
    loss: str = "cross_entropy"
    seed: int = 0

    def __post_init__(self):
        # tolerate lists coming from YAML / JSON
        for name in ("input_shape", "hidden", "conv_channels", "patch"):
            value = getattr(self, name)
            if isinstance(value, list):
                object.__setattr__(self, name, tuple(value))
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.arch!r}; expected one of {ARCHITECTURES}")
        if self.loss not in F.LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}")
        act = self.resolved_activation
        if act not in F.ACTIVATIONS:
            raise ConfigError(f"unknown activation {act!r}")
        T, C = self.input_shape
        if T < 1 or C < 1 or self.num_classes < 1:
            raise ConfigError("input_shape and num_classes must be positive")
        if self.arch == "transformer":
            pt, pc = self.resolved_patch
            if T % pt or C % pc:
                raise ConfigError(f"patch {pt}x{pc} does not divide window {T}x{C}")
            if self.dim % self.heads:
                raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.arch == "conv":
            k = self.kernel_size
            if T - len(self.conv_channels) * (k - 1) < 1:
                raise ConfigError("window too short for the conv stack")

    @property
    def resolved_activation(self) -> str:
        if self.activation is not None:
            return self.activation
        return "gelu" if self.arch == "transformer" else "relu"

    @property
    def resolved_patch(self) -> tuple[int, int]:
        if self.patch is not None:
            return tuple(self.patch)
        return (min(8, self.input_shape[0]), self.input_shape[1])

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _dense(rng, name: str, n_in: int, n_out: int) -> Layer:
    return Layer(name, "dense", {"weight": _glorot(rng, (n_out, n_in), n_in, n_out), "bias": np.zeros(n_out)})


def _norm(name: str, dim: int) -> Layer:
    return Layer(name, "norm", {"gain": np.ones(dim), "shift": np.zeros(dim)})


def _identity(site: str, x: Tensor) -> Tensor:
    return x


class Model:
    """Stateless network definition; parameters travel separately as a ParamSet."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.act = F.ACTIVATIONS[config.resolved_activation]
        self.loss_fn = F.LOSSES[config.loss]

    @property
    def input_shape(self) -> tuple[int, int]:
        return tuple(self.config.input_shape)

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def init_params(self) -> ParamSet:
        raise NotImplementedError

    def _logits(self, p, x: Tensor, obs: Observer, trace: dict | None) -> Tensor:
        raise NotImplementedError

    def check_input(self, X) -> None:
        shape = tuple(X.shape)
        if len(shape) != 3 or shape[1:] != self.input_shape:
            raise ShapeError("input", f"got {shape}, expected (batch, {self.input_shape[0]}, {self.input_shape[1]})")

    def logits(self, p: dict[str, dict[str, Tensor]], X, observe: Observer | None = None, trace: dict | None = None) -> Tensor:
        self.check_input(X)
        obs = observe or _identity
        x = obs("input", X if isinstance(X, Tensor) else Tensor(X))
        return obs("logits", self._logits(p, x, obs, trace))

    def loss(self, p, X, y, observe: Observer | None = None) -> Tensor:
        return self.loss_fn(self.logits(p, X, observe), y)


class LinearModel(Model):
    """Single affine map from the flattened window to class scores."""

    def init_params(self) -> ParamSet:
        rng = np.random.default_rng(self.config.seed)
        T, C = self.input_shape
        return ParamSet([_dense(rng, "head", T * C, self.num_classes)])

    def _logits(self, p, x, obs, trace):
        T, C = self.input_shape
        x = reshape(x, (x.shape[0], T * C))
        return F.linear(x, p["head"]["weight"], p["head"]["bias"])


class MLP(Model):
    def init_params(self) -> ParamSet:
        rng = np.random.default_rng(self.config.seed)
        T, C = self.input_shape
        sizes = [T * C, *self.config.hidden]
        layers = [_dense(rng, f"dense{i}", a, b) for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]
        layers.append(_dense(rng, "head", sizes[-1], self.num_classes))
        return ParamSet(layers)

    def _logits(self, p, x, obs, trace):
        T, C = self.input_shape
        x = reshape(x, (x.shape[0], T * C))
        for i in range(len(self.config.hidden)):
            name = f"dense{i}"
            x = obs(name, F.linear(x, p[name]["weight"], p[name]["bias"]))
            x = obs(f"{name}.act", self.act(x))
        return F.linear(x, p["head"]["weight"], p["head"]["bias"])


class ConvNet(Model):
    """Valid-padding 1-D convolutions over time, global average pool, linear head."""

    def init_params(self) -> ParamSet:
        rng = np.random.default_rng(self.config.seed)
        k = self.config.kernel_size
        c_in = self.input_shape[1]
        layers = []
        for i, c_out in enumerate(self.config.conv_channels):
            w = _glorot(rng, (c_out, k, c_in), k * c_in, k * c_out)
            layers.append(Layer(f"conv{i}", "conv", {"weight": w, "bias": np.zeros(c_out)}))
            c_in = c_out
        layers.append(_dense(rng, "head", c_in, self.num_classes))
        return ParamSet(layers)

    def _logits(self, p, x, obs, trace):
        k = self.config.kernel_size
        for i in range(len(self.config.conv_channels)):
            name = f"conv{i}"
            B, T, C = x.shape
            t_out = T - k + 1
            idx = np.arange(t_out)[:, None] + np.arange(k)[None, :]
            cols = reshape(getitem(x, (slice(None), idx)), (B, t_out, k * C))
            w = p[name]["weight"]
            x = obs(name, F.linear(cols, reshape(w, (w.shape[0], k * C)), p[name]["bias"]))
            x = obs(f"{name}.act", self.act(x))
        x = obs("pool", mean(x, axis=1))
        return F.linear(x, p["head"]["weight"], p["head"]["bias"])


class Transformer(Model):
    """Patch embedding, learned positions, pre-norm encoder blocks, mean pooling."""

    @property
    def n_tokens(self) -> int:
        pt, pc = self.config.resolved_patch
        T, C = self.input_shape
        return (T // pt) * (C // pc)

    def init_params(self) -> ParamSet:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        pt, pc = cfg.resolved_patch
        d = cfg.dim
        hidden = cfg.mlp_ratio * d
        layers = [
            _dense(rng, "embed", pt * pc, d),
            Layer("pos", "embedding", {"weight": rng.uniform(-0.02, 0.02, size=(self.n_tokens, d))}),
        ]
        for b in range(cfg.depth):
            layers.append(_norm(f"block{b}.ln1", d))
            layers.extend(_dense(rng, f"block{b}.{n}", d, d) for n in ("q", "k", "v", "proj"))
            layers.append(_norm(f"block{b}.ln2", d))
            layers.append(_dense(rng, f"block{b}.fc1", d, hidden))
            layers.append(_dense(rng, f"block{b}.fc2", hidden, d))
        layers.append(_norm("ln_f", d))
        layers.append(_dense(rng, "head", d, cfg.num_classes))
        return ParamSet(layers)

    def patchify(self, x: Tensor) -> Tensor:
        pt, pc = self.config.resolved_patch
        B, T, C = x.shape
        x = reshape(x, (B, T // pt, pt, C // pc, pc))
        x = transpose(x, (0, 1, 3, 2, 4))
        return reshape(x, (B, self.n_tokens, pt * pc))

    def _attention(self, p, prefix: str, x: Tensor, obs: Observer, trace: dict | None) -> Tensor:
        B, N, D = x.shape
        H = self.config.heads
        dh = D // H

        def heads(name):
            t = obs(f"{prefix}.{name}", F.linear(x, p[f"{prefix}.{name}"]["weight"], p[f"{prefix}.{name}"]["bias"]))
            return transpose(reshape(t, (B, N, H, dh)), (0, 2, 1, 3))

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = (q @ k.T) * (1.0 / math.sqrt(dh))
        attn = obs(f"{prefix}.attn", F.softmax(scores, -1))
        if trace is not None:
            trace[f"{prefix}.attn"] = attn.data
        out = reshape(transpose(attn @ v, (0, 2, 1, 3)), (B, N, D))
        return F.linear(out, p[f"{prefix}.proj"]["weight"], p[f"{prefix}.proj"]["bias"])

    def _logits(self, p, x, obs, trace):
        x = self.patchify(x)
        x = obs("embed", F.linear(x, p["embed"]["weight"], p["embed"]["bias"]) + p["pos"]["weight"])
        for b in range(self.config.depth):
            pre = f"block{b}"
            h = obs(f"{pre}.ln1", F.layer_norm(x, p[f"{pre}.ln1"]["gain"], p[f"{pre}.ln1"]["shift"]))
            x = obs(f"{pre}.res1", x + obs(f"{pre}.proj", self._attention(p, pre, h, obs, trace)))
            h = obs(f"{pre}.ln2", F.layer_norm(x, p[f"{pre}.ln2"]["gain"], p[f"{pre}.ln2"]["shift"]))
            h = obs(f"{pre}.fc1", F.linear(h, p[f"{pre}.fc1"]["weight"], p[f"{pre}.fc1"]["bias"]))
            h = obs(f"{pre}.fc1.act", self.act(h))
            h = obs(f"{pre}.fc2", F.linear(h, p[f"{pre}.fc2"]["weight"], p[f"{pre}.fc2"]["bias"]))
            x = obs(f"{pre}.res2", x + h)
        x = obs("ln_f", F.layer_norm(x, p["ln_f"]["gain"], p["ln_f"]["shift"]))
        x = obs("pool", mean(x, axis=1))
        return F.linear(x, p["head"]["weight"], p["head"]["bias"])


_CLASSES = {"mlp": MLP, "conv": ConvNet, "transformer": Transformer, "linear": LinearModel}


def build(config: ModelConfig) -> tuple[Model, ParamSet]:
    """Instantiate the architecture and its seeded initial parameters."""
    model = _CLASSES[config.arch](config)
    return model, model.init_params()


# --------------------------------------------------------------------------
# filter structure


@dataclass(frozen=True)
class FilterSlice:
    layer: int
    name: str
    key: str
    index: int
    start: int
    stop: int

    @property
    def size(self) -> int:
        return self.stop - self.start


def is_filter_array(kind: str, arr: np.ndarray) -> bool:
    return kind in FILTER_KINDS and arr.ndim >= 2


def filter_view(params: ParamSet) -> list[FilterSlice]:
    """One slice per output unit of every conv/dense/recurrent/embedding weight.

    Dense rows are treated as conv filters with a 1x1 output map, and recurrent
    weight matrices as dense ones.  Biases and norm parameters are not filters.
    """
    slices = []
    for li, key, start, stop, shape in params.entries():
        layer = params.layers[li]
        arr = layer.arrays[key]
        if not is_filter_array(layer.kind, arr):
            continue
        width = arr.size // shape[0]
        for j in range(shape[0]):
            slices.append(FilterSlice(li, layer.name, key, j, start + j * width, start + (j + 1) * width))
    return slices


def excluded_entries(params: ParamSet) -> list[tuple[int, str, int, int]]:
    """Flat ranges of the bias and normalization parameters."""
    return [
        (li, key, start, stop)
        for li, key, start, stop, _ in params.entries()
        if not is_filter_array(params.layers[li].kind, params.layers[li].arrays[key])
    ]


def filter_mask(params: ParamSet) -> np.ndarray:
    mask = np.zeros(params.n, dtype=bool)
    for s in filter_view(params):
        mask[s.start:s.stop] = True
    return mask


# --------------------------------------------------------------------------
# inference


def predict(model: Model, params: ParamSet, X: np.ndarray, batch_size: int = 512, observe: Observer | None = None) -> np.ndarray:
    """Class-probability matrix for windows ``X`` of shape (N, T, C)."""
    X = np.asarray(X, dtype=np.float64)
    model.check_input(X)
    view, _ = params.to_tensors()
    out = []
    with no_grad():
        for i in range(0, X.shape[0], batch_size):
            logits = model.logits(view, Tensor(X[i:i + batch_size]), observe)
            out.append(F.softmax(logits, -1).data)
    if not out:
        return np.zeros((0, model.num_classes))
    return np.concatenate(out)
