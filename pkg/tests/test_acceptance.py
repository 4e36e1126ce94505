"""One test per acceptance criterion; a summary line per criterion is printed at the end of the run."""

import json
import time
from fractions import Fraction

import numpy as np
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import QuadraticModel, dummy_batch, random_model, zoo
from harlens.autodiff.derivatives import Batch, gradient, hvp, hvp_fd, loss
from harlens.config import load_config
from harlens.data import synth_har
from harlens.landscape import evaluate_grid, fixed_batch, normalize_direction, sample_direction
from harlens.metrics import confusion, weighted_f1, weighted_f1_score
from harlens.models import ModelConfig, build, filter_mask, filter_view
from harlens.optim import AdamState, SamConfig, adam_step, sam_gradient, sam_perturbation, sam_value_and_gradient
from harlens.pipeline import run_compare, run_train
from harlens.robustness import CALIBRATION_SIZE, AdvConfig, calibration_subset, fgsm, quantize, quantize_symmetric
from harlens.spectrum import HessianConfig, density, lanczos, sharpness_summary

N_MODELS = 20


def rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def fd_gradient(model, batch, params, h=1e-5):
    theta = params.flat()
    out = np.empty_like(theta)
    for k in range(theta.size):
        e = theta.copy()
        e[k] += h
        lp = loss(model, batch, params.with_flat(e))
        e[k] -= 2 * h
        out[k] = (lp - loss(model, batch, params.with_flat(e))) / (2 * h)
    return out


def test_criterion_1_gradient_oracle(acceptance):
    start = time.perf_counter()
    worst, largest = 0.0, 0
    for i in range(N_MODELS):
        model, params, batch = random_model(i)
        largest = max(largest, params.n)
        worst = max(worst, rel(gradient(model, batch, params).flat(), fd_gradient(model, batch, params)))
    elapsed = time.perf_counter() - start
    acceptance(1, f"max rel err {worst:.2e} over {N_MODELS} models (n <= {largest}), {elapsed:.1f}s")
    assert largest <= 5000
    assert worst < 1e-6
    assert elapsed < 10.0


def test_criterion_2_hvp_oracle(acceptance):
    lin = sym = fd = 0.0
    for i in range(N_MODELS):
        model, params, batch = random_model(i)
        rng = np.random.default_rng(i)
        v = params.with_flat(rng.normal(size=params.n))
        w = params.with_flat(rng.normal(size=params.n))
        hv, hw = hvp(model, batch, params, v), hvp(model, batch, params, w)
        combo = hvp(model, batch, params, v * 2.5 + w * -0.5).flat()
        lin = max(lin, rel(combo, 2.5 * hv.flat() - 0.5 * hw.flat()))
        s1, s2 = v.dot(hw), w.dot(hv)
        sym = max(sym, abs(s1 - s2) / max(abs(s1), abs(s2)))
        fd = max(fd, rel(hv.flat(), hvp_fd(model, batch, params, v).flat()))
    quad = QuadraticModel([1.0, 2.0, 5.0])
    rng = np.random.default_rng(0)
    qerr = 0.0
    for _ in range(10):
        v = rng.normal(size=3)
        hv = hvp(quad, dummy_batch(), quad.params(rng.normal(size=3)), quad.params(v)).flat()
        qerr = max(qerr, np.max(np.abs(hv - np.array([1.0, 2.0, 5.0]) * v)))
    acceptance(2, f"linearity {lin:.1e}, symmetry {sym:.1e}, fd {fd:.1e}, quadratic |Hv-Av| {qerr:.1e}")
    assert lin < 1e-10 and sym < 1e-8 and fd < 1e-4 and qerr <= 1e-10


def test_criterion_3_filter_normalization(acceptance):
    worst = worst_fixed = 0.0
    n_filters = 0
    for k, (_, params) in enumerate(zoo()):
        d = normalize_direction(sample_direction(params, k), params).flat()
        theta = params.flat()
        for s in filter_view(params):
            worst = max(worst, abs(np.linalg.norm(d[s.start:s.stop]) - np.linalg.norm(theta[s.start:s.stop])))
            n_filters += 1
        mask = filter_mask(params)
        for scale in (1.0, 2.0):
            out = normalize_direction(params * scale, params).flat()
            worst_fixed = max(worst_fixed, np.max(np.abs(out[mask] - theta[mask])))
    acceptance(3, f"{n_filters} filters, max norm gap {worst:.1e}; delta=theta,2theta -> theta within {worst_fixed:.1e}")
    assert worst <= 1e-12 and worst_fixed <= 1e-12


def test_criterion_4_landscape_protocol(acceptance):
    tr, _, _ = synth_har(0)
    model, params = build(ModelConfig(arch="mlp", seed=0))
    batch, _ = fixed_batch(tr, 256, seed=0)
    d = normalize_direction(sample_direction(params, 1), params)
    e = normalize_direction(sample_direction(params, 2), params)
    before = params.digest()
    start = time.perf_counter()
    grid = evaluate_grid(model, params, batch, d, e)
    elapsed = time.perf_counter() - start
    center_exact = grid.at(0.0, 0.0) == loss(model, batch, params)

    ltr, _, _ = synth_har(4, n_classes=3, n_channels=2, n_windows_per_class=20, T=8)
    lm, lp = build(ModelConfig(arch="linear", input_shape=(8, 2), num_classes=3, loss="mse", seed=1))
    lgrid = evaluate_grid(lm, lp, Batch(ltr.X, ltr.y),
                          normalize_direction(sample_direction(lp, 1), lp), normalize_direction(sample_direction(lp, 2), lp))
    A, B = np.meshgrid(lgrid.alphas, lgrid.betas, indexing="ij")
    a, b = A.ravel(), B.ravel()
    design = np.stack([np.ones_like(a), a, b, a * a, a * b, b * b], axis=1)
    coef, *_ = np.linalg.lstsq(design, lgrid.losses.ravel(), rcond=None)
    resid = np.max(np.abs(design @ coef - lgrid.losses.ravel()))
    acceptance(4, f"grid {grid.losses.shape}, f(0,0) exact={center_exact}, hash kept={params.digest() == before}, "
                  f"quad residual {resid:.1e}, {elapsed:.1f}s for {params.n} params")
    assert grid.losses.shape == (31, 31) and grid.alphas[0] == -3.0 and grid.alphas[-1] == 3.0
    assert np.allclose(np.diff(grid.alphas), 0.2, atol=1e-12)
    assert center_exact and params.digest() == before
    assert resid < 1e-8
    assert elapsed < 60.0


def test_criterion_5_slq(acceptance):
    rng = np.random.default_rng(5)
    ritz_err = integ_err = trace_err = 0.0
    for trial in range(10):
        k = int(rng.integers(1, 11))
        eigs = np.sort(rng.choice(np.arange(-20, 60), size=k, replace=False) * 0.5)
        n = int(rng.integers(60, 400))
        d = np.resize(eigs, n)
        rs = [lanczos(lambda v: d * v, n, 50, int(s)) for s in rng.integers(0, 2**31, size=10)]
        for r in rs:
            vals, _ = r.ritz()
            ritz_err = max(ritz_err, np.max(np.abs(np.sort(vals) - eigs)))
        sd = density(rs, HessianConfig(order=50, probes=10))
        integ_err = max(integ_err, abs(sd.integral() - 1))
        trace = sharpness_summary(sd).trace
        exact = d.sum()
        trace_err = max(trace_err, abs(trace - exact) / max(abs(exact), 1e-12))
    diag = density([lanczos(lambda v: np.array([1.0, 2.0, 5.0]) * v, 3, 3, s) for s in range(10)])
    t3 = sharpness_summary(diag).trace
    acceptance(5, f"Ritz err {ritz_err:.1e}, |integral-1| {integ_err:.1e}, trace rel err {trace_err:.1e}, diag(1,2,5) trace {t3:.6f}")
    assert ritz_err < 1e-6 and integ_err < 1e-3 and trace_err <= 0.05
    assert abs(t3 - 8) <= 0.4


def test_criterion_6_sam(acceptance):
    model, params, batch = random_model(1)
    rng = np.random.default_rng(0)
    pa = ps = params
    sa = ss = AdamState.init(params)
    identical = True
    for _ in range(100):
        idx = rng.integers(0, len(batch), size=len(batch))
        b = Batch(batch.X[idx], batch.y[idx])
        pa, sa = adam_step(sa, pa, gradient(model, b, pa))
        ps, ss = adam_step(ss, ps, sam_gradient(model, b, ps, SamConfig(rho=0.0)))
        identical &= pa.flat().tobytes() == ps.flat().tobytes()
    norm_err = 0.0
    for i in range(100):
        m, p, b = random_model(i)
        rho = float(np.random.default_rng(i).uniform(0.001, 1.0))
        before = p.digest()
        eps = sam_perturbation(gradient(m, b, p), SamConfig(rho))
        norm_err = max(norm_err, abs(eps.norm() - rho) / rho)
        sam_value_and_gradient(m, b, p, SamConfig(rho))
        assert p.digest() == before
    q = QuadraticModel([2.0])
    hand = sam_gradient(q, dummy_batch(), q.params([1.0]), SamConfig(rho=0.5)).flat()[0]
    acceptance(6, f"rho=0 bit-identical over 100 steps={identical}, max | ||eps||-rho |/rho {norm_err:.1e}, 1-D example {hand}")
    assert identical and norm_err <= 1e-9 and hand == 3.0


def test_criterion_7_fgsm(acceptance):
    max_excess = 0.0
    for i, (model, params) in enumerate(zoo()):
        rng = np.random.default_rng(i)
        b = Batch(rng.normal(size=(64, 32, 6)), rng.integers(0, 8, 64))
        for eps in (0.01, 0.1, 0.37):
            adv = fgsm(model, params, b, AdvConfig(eps))
            max_excess = max(max_excess, np.max(np.abs(adv.X - b.X)) - eps)
    model, params = build(ModelConfig(arch="linear", seed=2))
    rng = np.random.default_rng(7)
    X, y = rng.normal(size=(1000, 32, 6)), rng.integers(0, 8, 1000)
    identity = np.array_equal(fgsm(model, params, Batch(X, y), AdvConfig(0.0)).X, X)
    adv = fgsm(model, params, Batch(X, y))

    def per_sample(Z):
        return np.array([loss(model, Batch(Z[i:i + 1], y[i:i + 1]), params) for i in range(len(y))])

    gains = per_sample(adv.X) - per_sample(X)
    acceptance(7, f"max(|x_adv-x|_inf - eps) {max_excess:.1e}, eps=0 identity={identity}, "
                  f"min convex gain {gains.min():.2e} on 1000 samples, default eps {AdvConfig().eps}")
    assert max_excess <= 0.0 and identity and np.all(gains >= 0) and AdvConfig().eps == 0.01


def test_criterion_8_quantization(acceptance):
    rng = np.random.default_rng(0)
    worst_ratio = 0.0
    in_range = True
    for _ in range(200):
        w = rng.uniform(-1, 1, size=int(rng.integers(1, 500))) * rng.uniform(0.01, 10)
        qt = quantize_symmetric(w)
        in_range &= qt.q.min() >= -128 and qt.q.max() <= 127
        worst_ratio = max(worst_ratio, np.max(np.abs(qt.dequantize() - w)) / qt.scale)
    tr, va, _ = synth_har(7)
    model, params = build(ModelConfig(arch="transformer", seed=1))
    calib = calibration_subset(tr)
    a, b = quantize(model, params, calib), quantize(model, params, calib)
    same = (a.activations == b.activations
            and all(np.array_equal(a.weights[k].q, b.weights[k].q) and a.weights[k].scale == b.weights[k].scale for k in a.weights)
            and a.float_params == b.float_params)
    for qt in a.weights.values():
        in_range &= qt.q.min() >= -128 and qt.q.max() <= 127
    default_size = load_config().analysis("quantize")["calibration_size"]
    acceptance(8, f"ints in [-128,127]={in_range}, max round-trip err {worst_ratio:.4f}*s, calibration {len(calib)} "
                  f"(default {CALIBRATION_SIZE}/{default_size}), deterministic={same}")
    assert in_range and worst_ratio <= 0.5 + 1e-12
    assert len(calib) == CALIBRATION_SIZE == default_size == 256 == a.calibration_size
    assert same


LABELLED = st.integers(1, 6).flatmap(
    lambda k: st.tuples(st.just(k), st.lists(st.tuples(st.integers(0, k - 1), st.integers(0, k - 1)), min_size=1, max_size=40))
)


@settings(max_examples=300, deadline=None, derandomize=True)
@given(LABELLED, st.randoms(use_true_random=False))
def _fw_properties(case, rnd):
    k, data = case
    preds, labels = zip(*data)
    fw = weighted_f1_score(preds, labels, k)
    assert 0.0 <= fw <= 1.0
    shuffled = list(data)
    rnd.shuffle(shuffled)
    p2, l2 = zip(*shuffled)
    assert weighted_f1_score(p2, l2, k) == fw


def test_criterion_9_weighted_f1(acceptance):
    hand = weighted_f1(confusion([0, 1, 1, 1], [0, 0, 1, 1], 2))
    perfect = weighted_f1_score([2, 0, 1, 1], [2, 0, 1, 1], 3)
    _fw_properties()
    acceptance(9, f"hand case {hand!r} (11/15 = {float(Fraction(11, 15))!r}), perfect {perfect}, properties ok")
    assert hand == float(Fraction(11, 15)) and perfect == 1.0


def test_criterion_10_end_to_end(acceptance, tmp_path):
    start = time.perf_counter()
    results = {}
    for arch in ("mlp", "transformer"):
        histories = []
        for rerun in range(2):
            cfg = load_config(overrides=[f"model.arch={arch}", "seed=0"])
            out = run_train(cfg, tmp_path / f"{arch}{rerun}")
            histories.append((out / "history.csv").read_bytes())
        best = json.loads((out / "checkpoint.json").read_text())["extra"]
        results[arch] = (best["val_fw"], best["best_epoch"], histories[0] == histories[1])
    elapsed = time.perf_counter() - start
    ds = load_config().raw["dataset"]
    syn = ds["synthetic"]
    shape_ok = (syn["n_classes"], syn["n_channels"], ds["window"], ds["overlap"]) == (8, 6, 32, 16)
    text = ", ".join(f"{a} val F_w {v:.4f} (epoch {e}, byte-stable={s})" for a, (v, e, s) in results.items())
    acceptance(10, f"{text}; {elapsed:.0f}s incl. reruns")
    assert shape_ok
    for v, e, stable in results.values():
        assert v >= 0.90 and e <= 20 and stable
    assert elapsed < 300


def test_criterion_11_trend_report(acceptance, tmp_path):
    for name in ("adam", "sam"):
        (tmp_path / f"{name}.yaml").write_text(yaml.safe_dump({"train": {"optimizer": name}}))
    result = run_compare(str(tmp_path / "adam.yaml"), str(tmp_path / "sam.yaml"), tmp_path / "cmp", seeds=5)
    med = result["median"]
    keys = ("lambda_max", "negative_mass", "adversarial_delta", "quantized_delta")
    text = "; ".join(f"{k} adam {med['a'][k]:.4g} sam {med['b'][k]:.4g}" for k in keys)
    acceptance(11, f"5-seed medians (reported, not asserted): {text}")
    assert len(result["rows"]) == 5
    assert all(k in med["a"] and k in med["b"] and k in med["delta"] for k in keys)
