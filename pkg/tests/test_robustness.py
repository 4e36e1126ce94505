import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from harlens.autodiff import Tensor, no_grad
from harlens.autodiff.derivatives import Batch, input_gradient
from harlens.checkpoint import load_checkpoint, load_quantized, save_checkpoint, save_quantized
from harlens.data import WindowSet, fit_normalizer, synth_har
from harlens.errors import SchemaError
from harlens.models import ModelConfig, build
from harlens.optim import TrainConfig, train
from harlens.robustness import (
    CALIBRATION_SIZE,
    AdvConfig,
    affine_params,
    calibration_subset,
    evaluate_robustness,
    fake_quantize,
    fgsm,
    fgsm_windows,
    quantize,
    quantize_symmetric,
)


def per_sample_ce(model, params, X, y):
    with no_grad():
        z = model.logits(params.to_tensors()[0], Tensor(X)).data
    z = z - z.max(1, keepdims=True)
    return np.log(np.exp(z).sum(1)) - z[np.arange(len(y)), y]


@pytest.fixture(scope="module")
def trained():
    tr, va, te = synth_har(7)
    norm = fit_normalizer(tr)
    tr, va, te = norm.apply(tr), norm.apply(va), norm.apply(te)
    model, params = build(ModelConfig(arch="mlp", seed=1))
    result = train(model, params, tr, va, TrainConfig(max_epochs=20))
    return model, result.params, tr, va, te


# ---------------------------------------------------------------- fgsm


def test_fgsm_eps_zero_identity():
    model, params = build(ModelConfig(arch="conv", seed=0))
    X = np.random.default_rng(0).normal(size=(4, 32, 6))
    out = fgsm(model, params, Batch(X, [0, 1, 2, 3]), AdvConfig(0.0))
    assert np.array_equal(out.X, X)


def test_default_eps():
    assert AdvConfig().eps == 0.01
    with pytest.raises(ValueError):
        AdvConfig(-1.0)


@pytest.mark.parametrize("arch", ["mlp", "conv", "transformer"])
def test_fgsm_infinity_bound(arch):
    model, params = build(ModelConfig(arch=arch, seed=0))
    rng = np.random.default_rng(1)
    b = Batch(rng.normal(size=(16, 32, 6)), rng.integers(0, 8, 16))
    eps = 0.03
    adv = fgsm(model, params, b, AdvConfig(eps))
    diff = np.abs(adv.X - b.X)
    assert np.max(diff) <= eps
    _, gx = input_gradient(model, b, params)
    nz = gx != 0
    assert np.allclose(adv.X[nz] - b.X[nz], eps * np.sign(gx[nz]), rtol=0, atol=1e-15)
    assert np.array_equal(adv.X[~nz], b.X[~nz])
    assert np.array_equal(adv.y, b.y)


def test_fgsm_windows_chunking_matches_single_batch():
    model, params = build(ModelConfig(arch="mlp", seed=0))
    rng = np.random.default_rng(2)
    ws = WindowSet(rng.normal(size=(30, 32, 6)), rng.integers(0, 8, 30), 8, 32, 16)
    whole = fgsm(model, params, Batch(ws.X, ws.y)).X
    chunked = fgsm_windows(model, params, ws, batch_size=7).X
    assert np.array_equal(whole, chunked)


def test_convex_linear_model_monotone():
    model, params = build(ModelConfig(arch="linear", seed=3))
    rng = np.random.default_rng(4)
    X, y = rng.normal(size=(1000, 32, 6)), rng.integers(0, 8, 1000)
    adv = fgsm(model, params, Batch(X, y))
    assert np.all(per_sample_ce(model, params, adv.X, y) >= per_sample_ce(model, params, X, y))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.5))
def test_binary_linear_adversarial_fw_never_improves(seed, eps):
    # with two classes a loss increase lowers the true-class margin, so no prediction can become correct
    rng = np.random.default_rng(seed)
    model, params = build(ModelConfig(arch="linear", input_shape=(4, 2), num_classes=2, seed=seed))
    ws = WindowSet(rng.normal(size=(40, 4, 2)), rng.integers(0, 2, 40), 2, 4, 0)
    rep = evaluate_robustness(model, params, None, ws, AdvConfig(eps))
    assert rep.adversarial_fw <= rep.clean_fw


def test_multiclass_linear_adversarial_fw(trained):
    _, _, tr, va, te = trained
    model, params = build(ModelConfig(arch="linear", seed=1))
    params = train(model, params, tr, va, TrainConfig(max_epochs=5)).params
    rep = evaluate_robustness(model, params, None, te, AdvConfig(0.05))
    assert rep.adversarial_fw <= rep.clean_fw


# ---------------------------------------------------------------- quantization


def test_hand_two_weights():
    qt = quantize_symmetric(np.array([0.5, -1.0]))
    assert qt.scale == 1 / 127 and qt.zero_point == 0
    assert qt.q.tolist() == [64, -127]
    deq = qt.dequantize()
    assert deq[0] == pytest.approx(64 / 127, abs=1e-15) and deq[1] == -1.0


def test_zero_weight_exact():
    qt = quantize_symmetric(np.array([0.0, 0.3, -0.2]))
    assert qt.q[0] == 0 and qt.dequantize()[0] == 0.0


def test_all_zero_tensor_scale_floor():
    qt = quantize_symmetric(np.zeros(5))
    assert qt.scale == 1e-12 and np.all(qt.q == 0)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 50), elements=st.floats(-1.0, 1.0)))
def test_round_trip_half_step(w):
    qt = quantize_symmetric(w)
    assert qt.q.dtype == np.int8
    assert qt.q.min() >= -128 and qt.q.max() <= 127
    assert np.all(np.abs(qt.dequantize() - w) <= qt.scale / 2 + 1e-15)


def test_uniform_weights_scale():
    w = np.linspace(-1, 1, 1001)
    qt = quantize_symmetric(w)
    assert qt.scale == pytest.approx(1 / 127)
    assert np.max(np.abs(qt.dequantize() - w)) <= 0.5 / 127 + 1e-15


def test_activation_range_and_clamping():
    scale, zp = affine_params(0.5, 3.0)  # range is widened to include 0
    assert -128 <= zp <= 127
    assert fake_quantize(np.array([0.0]), scale, zp)[0] == 0.0
    x = np.array([-10.0, 10.0, 1.234])
    out = fake_quantize(x, scale, zp)
    assert out[0] == scale * (-128 - zp) and out[1] == scale * (127 - zp)
    assert abs(out[2] - 1.234) <= scale / 2 + 1e-15


def test_calibration_default_is_256(trained):
    model, params, tr, *_ = trained
    assert CALIBRATION_SIZE == 256
    calib = calibration_subset(tr)
    assert len(calib) == 256
    assert quantize(model, params, calib).calibration_size == 256


def test_quantized_model_deterministic(trained, tmp_path):
    model, params, tr, *_ = trained
    calib = calibration_subset(tr, seed=5)
    a, b = quantize(model, params, calib), quantize(model, params, calib)
    save_quantized(tmp_path / "a.json", model.config, a)
    save_quantized(tmp_path / "b.json", model.config, b)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    for k, qt in a.weights.items():
        assert qt.q.min() >= -128 and qt.q.max() <= 127
        assert np.all(a.float_params.layer(k[0]).arrays[k[1]] == 0.0)
    assert set(a.activations) >= {"input", "dense0", "dense0.act", "logits"}


def test_identity_quantization_preserves_everything():
    model, params = build(ModelConfig(arch="mlp", hidden=(16,), seed=6))
    rng = np.random.default_rng(0)
    arrays = []
    for layer in params.layers:
        for key, arr in layer.arrays.items():
            k = rng.integers(-127, 128, size=arr.shape)
            if arr.ndim >= 2:
                k.flat[0] = 127  # max|w| = 127 * 2**-7 pins the scale to 2**-7
            arrays.append(k * 2.0**-7)
    params = params.from_arrays(arrays)
    ws = WindowSet(rng.normal(size=(60, 32, 6)), rng.integers(0, 8, 60), 8, 32, 16)
    qm = quantize(model, params, ws, quantize_activations=False)
    assert qm.dequantized_params() == params
    rep = evaluate_robustness(model, params, qm, ws, AdvConfig(0.0))
    assert rep.clean_fw == rep.adversarial_fw == rep.quantized_fw
    assert rep.adversarial_delta == rep.quantized_delta == 0.0


def test_quantized_agrees_above_pinned_margin(trained):
    model, params, tr, va, te = trained
    qm = quantize(model, params, calibration_subset(tr, seed=0))
    X = np.concatenate([tr.X, va.X, te.X])
    with no_grad():
        z = model.logits(params.to_tensors()[0], Tensor(X)).data
    top2 = np.sort(z, 1)[:, -2:]
    confident = top2[:, 1] - top2[:, 0] > 0.1  # pinned regression threshold in logit units
    assert confident.mean() > 0.9
    assert np.array_equal(z.argmax(1)[confident], qm.predict(model, X).argmax(1)[confident])


def test_report_deltas(trained):
    model, params, tr, va, te = trained
    qm = quantize(model, params, calibration_subset(tr))
    rep = evaluate_robustness(model, params, qm, te)
    assert rep.adversarial_delta == rep.clean_fw - rep.adversarial_fw
    assert rep.quantized_delta == rep.clean_fw - rep.quantized_fw
    assert all(0 <= v <= 1 for v in (rep.clean_fw, rep.adversarial_fw, rep.quantized_fw))
    assert rep.eps == 0.01 and rep.calibration_size == 256
    with pytest.raises(ValueError):
        evaluate_robustness(model, params, qm, te.subset([]))


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(trained, tmp_path):
    model, params, tr, *_ = trained
    save_checkpoint(tmp_path / "c.json", model.config, params, {"note": 1})
    cfg, back, extra = load_checkpoint(tmp_path / "c.json")
    assert cfg == model.config and back == params and extra == {"note": 1}
    qm = quantize(model, params, calibration_subset(tr))
    save_quantized(tmp_path / "q.json", model.config, qm)
    cfg2, qm2 = load_quantized(tmp_path / "q.json")
    assert cfg2 == model.config
    assert qm2.dequantized_params() == qm.dequantized_params()
    assert qm2.activations == qm.activations
    X = tr.X[:50]
    assert np.array_equal(qm2.predict(model, X), qm.predict(model, X))
    with pytest.raises(SchemaError):
        load_checkpoint(tmp_path / "q.json")


def test_corrupt_checkpoint_rejected(trained, tmp_path):
    model, params, *_ = trained
    path = tmp_path / "c.json"
    save_checkpoint(path, model.config, params)
    path.write_text(path.read_text().replace('"version": 1', '"version": 9'))
    with pytest.raises(SchemaError):
        load_checkpoint(path)
