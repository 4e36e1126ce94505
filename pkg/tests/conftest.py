import numpy as np
import pytest

from harlens.autodiff import Tensor
from harlens.autodiff.derivatives import Batch
from harlens.data import synth_har
from harlens.models import ModelConfig, build
from harlens.params import Layer, ParamSet

ACCEPTANCE_KEY = pytest.StashKey[dict]()


class QuadraticModel:
    """L(theta) = 0.5 * sum(a * theta**2), i.e. H = diag(a); ignores the batch."""

    def __init__(self, a):
        self.a = np.asarray(a, dtype=np.float64)

    def params(self, theta) -> ParamSet:
        return ParamSet([Layer("q", "dense", {"theta": np.asarray(theta, dtype=np.float64).reshape(1, -1)})])

    def loss(self, p, X, y):
        t = p["q"]["theta"]
        return (Tensor(self.a.reshape(1, -1)) * t * t).sum() * 0.5


def dummy_batch() -> Batch:
    return Batch(np.zeros((1, 1, 1)), np.zeros(1, dtype=np.int64))


def small_configs():
    """Architectures kept under 5k parameters so finite differences stay fast."""
    return [
        ModelConfig(arch="linear", input_shape=(6, 3), num_classes=4),
        ModelConfig(arch="mlp", input_shape=(8, 3), num_classes=4, hidden=(8, 6), activation="tanh"),
        ModelConfig(arch="mlp", input_shape=(6, 2), num_classes=3, hidden=(16,), activation="gelu"),
        ModelConfig(arch="conv", input_shape=(12, 3), num_classes=4, conv_channels=(4, 5), kernel_size=3, activation="tanh"),
        ModelConfig(arch="transformer", input_shape=(8, 3), num_classes=3, patch=(2, 3), dim=6, heads=2, depth=1, mlp_ratio=1),
    ]


def random_model(i: int):
    """The ``i``-th member of a deterministic family of small random models with a batch."""
    cfgs = small_configs()
    base = cfgs[i % len(cfgs)]
    cfg = ModelConfig.from_dict({**base.to_dict(), "seed": 1000 + i})
    model, params = build(cfg)
    rng = np.random.default_rng(i)
    T, C = cfg.input_shape
    batch = Batch(rng.normal(size=(8, T, C)), rng.integers(0, cfg.num_classes, size=8))
    return model, params, batch


def zoo():
    """Default-size members of every architecture."""
    return [build(ModelConfig(arch=a, seed=3)) for a in ("linear", "mlp", "conv", "transformer")]


@pytest.fixture(scope="session")
def synth7():
    return synth_har(7)


@pytest.fixture
def acceptance(request):
    """Record one result line for the terminal summary."""
    store = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def record(number: int, line: str):
        store[number] = line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    reports = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            name = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" in name and rep.when == "call":
                number = int(name.split("test_criterion_")[1].split("_")[0])
                reports[number] = outcome
    if not reports:
        return
    details = config.stash.get(ACCEPTANCE_KEY, {})
    terminalreporter.section("acceptance criteria")
    for number in sorted(reports):
        status = "PASS" if reports[number] == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {details.get(number, '')}")
