"""Experiment runs: data preparation, training, analyses and comparisons."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import statistics
from dataclasses import dataclass
from pathlib import Path

import yaml

from .checkpoint import load_checkpoint, save_checkpoint, save_quantized
from .config import ExperimentConfig, load_config
from .data import (
    CsvSchema,
    Normalizer,
    SynthParams,
    WindowSet,
    concat,
    fit_normalizer,
    load_csv,
    make_windows,
    split_chronological,
    synth_recordings,
    windows_and_split,
    write_csv,
)
from .errors import ConfigError, HarlensError
from .landscape import evaluate_grid, fixed_batch, normalize_direction, sample_direction
from .models import build
from .optim import evaluate_fw, train
from .robustness import AdvConfig, calibration_subset, evaluate_robustness, quantize
from .spectrum import HessianConfig, hessian_spectrum, write_spectrum

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "HARLENS_OUTPUT_ROOT"
SUMMARY_KEYS = (
    "val_fw",
    "test_fw",
    "lambda_max",
    "lambda_min",
    "trace",
    "negative_mass",
    "adversarial_fw",
    "adversarial_delta",
    "quantized_fw",
    "quantized_delta",
)


def resolve_output(path) -> Path:
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# data


@dataclass
class PreparedData:
    train: WindowSet
    val: WindowSet
    test: WindowSet
    normalizer: Normalizer

    @property
    def input_shape(self) -> tuple[int, int]:
        return (self.train.window_length, self.train.n_channels)

    @property
    def num_classes(self) -> int:
        return self.train.num_classes


def _csv_splits(cfg: ExperimentConfig, T: int, overlap: int):
    ds = cfg.raw["dataset"]
    c = ds["csv"]
    schema = CsvSchema(c["label_column"], tuple(c["channels"]) if c["channels"] else None, c["subject_column"], c["sample_rate_hz"])
    entries = [{"path": e} if isinstance(e, str) else e for e in c["files"]]
    recs = [(load_csv(cfg.base_dir / e["path"], schema), e.get("split")) for e in entries]
    k = ds["num_classes"] or max(int(r.labels.max()) + 1 for r, _ in recs if len(r))
    parts: dict[str, list[WindowSet]] = {"train": [], "val": [], "test": []}
    for rec, split in recs:
        ws = make_windows(rec, T, overlap, k)
        if split is None:
            for name, part in zip(("train", "val", "test"), split_chronological(ws, c["fractions"])):
                parts[name].append(part)
        else:
            parts[split].append(ws)
    out = []
    for name in ("train", "val", "test"):
        if not parts[name]:
            raise ConfigError(f"no recordings assigned to the {name} split")
        out.append(concat(parts[name]))
    return tuple(out)


def load_splits(cfg: ExperimentConfig) -> tuple[WindowSet, WindowSet, WindowSet]:
    T, overlap = cfg.window
    ds = cfg.raw["dataset"]
    if ds["kind"] == "csv":
        return _csv_splits(cfg, T, overlap)
    s = ds["synthetic"]
    params = SynthParams(s["n_classes"], s["n_channels"], s["n_windows_per_class"], T, overlap, s["noise"])
    recs = synth_recordings(cfg.sub_seed("data.synth"), params)
    return windows_and_split(recs, T, overlap, s["n_classes"])


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    tr, va, te = load_splits(cfg)
    norm = fit_normalizer(tr)
    return PreparedData(norm.apply(tr), norm.apply(va), norm.apply(te), norm)


def write_synthetic(out_dir, seed: int, params: SynthParams) -> Path:
    """Write one CSV per class plus a dataset config that reproduces the split."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for c, rec in enumerate(synth_recordings(seed, params)):
        name = f"class{c}.csv"
        write_csv(out_dir / name, rec)
        files.append(name)
    cfg = {
        "dataset": {
            "kind": "csv",
            "window": params.window_length,
            "overlap": params.resolved_overlap,
            "num_classes": params.n_classes,
            "csv": {"files": files},
        }
    }
    path = out_dir / "dataset.yaml"
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))
    return path


# --------------------------------------------------------------------------
# train / analyze


def run_train(cfg: ExperimentConfig, out_dir=None) -> Path:
    out = resolve_output(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = prepare_data(cfg)
    mcfg = cfg.model_config(data.input_shape, data.num_classes)
    model, params = build(mcfg)
    tcfg = cfg.train_config()
    result = train(model, params, data.train, data.val, tcfg)
    (out / "history.csv").write_text(result.history_csv())
    extra = {
        "best_epoch": result.best_epoch,
        "val_fw": result.history[result.best_epoch - 1].val_fw,
        "optimizer": tcfg.optimizer,
        "rho": tcfg.rho,
        "steps": result.steps,
    }
    save_checkpoint(out / "checkpoint.json", mcfg, result.params, extra)
    _write_json(out / "normalizer.json", data.normalizer.to_dict())
    (out / "config.yaml").write_text(cfg.dump())
    log.info("trained %s, best epoch %d, val F_w %.4f", mcfg.arch, result.best_epoch, extra["val_fw"])
    return out


def run_analyze(cfg: ExperimentConfig, checkpoint=None, out_dir=None) -> dict:
    out = resolve_output(out_dir or cfg.output_dir)
    ckpt = Path(checkpoint) if checkpoint else out / "checkpoint.json"
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    mcfg, params, extra = load_checkpoint(ckpt)
    data = prepare_data(cfg)
    expected = cfg.model_config(data.input_shape, data.num_classes)
    if expected.to_dict() != mcfg.to_dict():
        raise ConfigError(f"checkpoint {ckpt} was built for a different architecture than the config describes")
    model, _ = build(mcfg)
    adir = out / "analysis"
    if any(cfg.analysis(name)["enabled"] for name in ("landscape", "hessian", "fgsm", "quantize")):
        adir.mkdir(parents=True, exist_ok=True)
    artifacts: list[Path] = []
    summary: dict = {"val_fw": extra.get("val_fw"), "test_fw": evaluate_fw(model, params, data.test)}

    lc = cfg.analysis("landscape")
    if lc["enabled"]:
        batch, bmeta = fixed_batch(data.train, lc["batch_size"], cfg.sub_seed("landscape.batch"))
        seeds = {"delta_seed": cfg.sub_seed("landscape.delta"), "eta_seed": cfg.sub_seed("landscape.eta")}
        delta = normalize_direction(sample_direction(params, seeds["delta_seed"], lc["direction_mean"]), params)
        eta = normalize_direction(sample_direction(params, seeds["eta_seed"], lc["direction_mean"]), params)
        grid = evaluate_grid(model, params, batch, delta, eta, lc["range_min"], lc["range_max"], lc["step"])
        grid.metadata.update(bmeta)
        grid.metadata.update(seeds)
        grid.metadata["direction_mean"] = lc["direction_mean"]
        grid.write(adir / "landscape.csv", adir / "landscape.json")
        artifacts += [adir / "landscape.csv", adir / "landscape.json"]
        summary["landscape_center"] = grid.at(0.0, 0.0)

    hc = cfg.analysis("hessian")
    if hc["enabled"]:
        batch, bmeta = fixed_batch(data.train, hc["batch_size"], cfg.sub_seed("hessian.batch"))
        hcfg = HessianConfig(order=hc["order"], probes=hc["probes"], grid_points=hc["grid_points"], sigma=hc["sigma"])
        sd = hessian_spectrum(model, params, batch, hcfg, seed=cfg.sub_seed("hessian.probes"))
        bmeta["non_paper_choices"] = {"probes": hc["probes"], "sigma": sd.sigma, "probe_distribution": "rademacher"}
        spec = write_spectrum(sd, adir / "spectrum.csv", adir / "spectrum.json", bmeta)
        artifacts += [adir / "spectrum.csv", adir / "spectrum.json"]
        summary.update({k: spec[k] for k in ("lambda_max", "lambda_min", "trace", "negative_mass")})

    fc, qc = cfg.analysis("fgsm"), cfg.analysis("quantize")
    if fc["enabled"] or qc["enabled"]:
        qmodel = None
        if qc["enabled"]:
            calib = calibration_subset(data.train, qc["calibration_size"], cfg.sub_seed("quantize.calibration"))
            qmodel = quantize(model, params, calib, qc["activations"])
            save_quantized(adir / "quantized.json", mcfg, qmodel)
            artifacts.append(adir / "quantized.json")
        adv = AdvConfig(fc["eps"]) if fc["enabled"] else None
        report = evaluate_robustness(model, params, qmodel, data.test, adv)
        report.write(adir / "robustness.json")
        artifacts.append(adir / "robustness.json")
        rd = report.to_dict()
        summary.update({k: rd[k] for k in ("adversarial_fw", "adversarial_delta", "quantized_fw", "quantized_delta") if rd[k] is not None})

    manifest = {
        "checkpoint_sha256": sha256_file(ckpt),
        "model_arch": mcfg.arch,
        "optimizer": extra.get("optimizer"),
        "seed": cfg.seed,
        "artifacts": {str(p.relative_to(out)): sha256_file(p) for p in artifacts},
        "summary": summary,
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


# --------------------------------------------------------------------------
# comparison


def _load_manifest(run_dir: Path) -> dict:
    path = Path(run_dir) / "manifest.json"
    if not path.is_file():
        raise ConfigError(f"no manifest in {run_dir}; run 'analyze' first")
    return json.loads(path.read_text())


def compare_manifests(pairs: list[tuple[str, dict, dict]]) -> dict:
    """Per-pair rows with ``b - a`` deltas, and medians over pairs."""
    rows = []
    for label, a, b in pairs:
        if a["model_arch"] != b["model_arch"]:
            raise HarlensError(f"architecture mismatch in pair {label}: {a['model_arch']} vs {b['model_arch']}")
        keys = [k for k in SUMMARY_KEYS if k in a["summary"] and k in b["summary"]]
        sa, sb = a["summary"], b["summary"]
        rows.append(
            {
                "label": label,
                "a": {k: sa[k] for k in keys},
                "b": {k: sb[k] for k in keys},
                "delta": {k: sb[k] - sa[k] for k in keys},
            }
        )
    median = {}
    if rows:
        for part in ("a", "b", "delta"):
            keys = rows[0][part].keys()
            median[part] = {k: statistics.median(r[part][k] for r in rows) for k in keys}
    return {
        "a_optimizer": pairs[0][1].get("optimizer") if pairs else None,
        "b_optimizer": pairs[0][2].get("optimizer") if pairs else None,
        "rows": rows,
        "median": median,
    }


def run_compare(a: str, b: str, out_dir, seeds: int = 1, overrides: list[str] | None = None) -> dict:
    """Compare two run directories, or train and analyze two configs over ``seeds`` seeds."""
    out = resolve_output(out_dir).resolve()
    out.mkdir(parents=True, exist_ok=True)
    pa, pb = (Path(p) if Path(p).exists() else resolve_output(p) for p in (a, b))
    if pa.is_dir() and pb.is_dir():
        pairs = [(f"{pa.name}|{pb.name}", _load_manifest(pa), _load_manifest(pb))]
    elif pa.is_file() and pb.is_file():
        pairs = []
        for i in range(seeds):
            manifests = []
            for tag, path in (("a", pa), ("b", pb)):
                base = load_config(path, overrides)
                cfg = load_config(path, [*(overrides or []), f"seed={base.seed + i}"])
                run_dir = out / tag / f"seed{cfg.seed}"
                run_train(cfg, run_dir)
                manifests.append(run_analyze(cfg, out_dir=run_dir))
            pairs.append((f"seed{base.seed + i}", *manifests))
    else:
        raise ConfigError("compare needs two run directories or two config files")
    result = compare_manifests(pairs)
    _write_json(out / "comparison.json", result)
    return result
