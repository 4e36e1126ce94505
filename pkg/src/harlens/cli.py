"""Command-line entry point: ``harlens {synth,train,analyze,run,compare}``.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__
from .data import SynthParams
from .errors import ConfigError, HarlensError
from .pipeline import OUTPUT_ROOT_ENV, resolve_output, run_analyze, run_compare, run_train, write_synthetic
from .config import load_config

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _overrides(args) -> list[str]:
    out = list(args.set or [])
    for flag, key in (("seed", "seed"), ("optimizer", "train.optimizer"), ("rho", "train.rho"),
                      ("epochs", "train.max_epochs"), ("arch", "model.arch"), ("output_dir", "output_dir")):
        value = getattr(args, flag, None)
        if value is not None:
            out.append(f"{key}={value}")
    return out


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", nargs="?", help="experiment YAML file; analyze falls back to <output-dir>/config.yaml")
    p.add_argument("-o", "--output-dir", dest="output_dir", help=f"run directory (relative paths resolve under ${OUTPUT_ROOT_ENV})")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key, e.g. analysis.hessian.probes=5")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="harlens", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic HAR dataset as CSV recordings")
    p.add_argument("-o", "--output-dir", dest="output_dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--channels", type=int, default=6)
    p.add_argument("--windows-per-class", type=int, default=60)
    p.add_argument("--window", type=int, default=32)
    p.add_argument("--overlap", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.5)

    for name, help_ in (("train", "train a model and write checkpoint + history CSV"),
                        ("analyze", "run the enabled analyses on a trained checkpoint"),
                        ("run", "train, then analyze")):
        p = sub.add_parser(name, help=help_)
        _add_common(p)
        if name != "analyze":
            p.add_argument("--optimizer", choices=("adam", "sam"))
            p.add_argument("--rho", type=float)
            p.add_argument("--epochs", type=int)
            p.add_argument("--arch", choices=("mlp", "conv", "transformer", "linear"))
        if name == "analyze":
            p.add_argument("--checkpoint", help="defaults to <output-dir>/checkpoint.json")

    p = sub.add_parser("compare", help="compare two runs, or train+analyze two configs over several seeds")
    p.add_argument("a", help="run directory or config file")
    p.add_argument("b", help="run directory or config file")
    p.add_argument("-o", "--output-dir", dest="output_dir", required=True)
    p.add_argument("--seeds", type=int, default=1, help="seeds per config (config mode only)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override applied to both configs")
    return parser


def _dispatch(args) -> None:
    if args.command == "synth":
        params = SynthParams(args.classes, args.channels, args.windows_per_class, args.window, args.overlap, args.noise)
        path = write_synthetic(resolve_output(args.output_dir), args.seed, params)
        print(path)
        return
    if args.command == "compare":
        result = run_compare(args.a, args.b, args.output_dir, args.seeds, args.set)
        print(json.dumps(result["median"], indent=2, sort_keys=True))
        return
    config = args.config
    if config is None and args.command == "analyze" and args.output_dir:
        # reuse the configuration the run was trained with
        saved = resolve_output(args.output_dir) / "config.yaml"
        config = saved if saved.is_file() else None
    cfg = load_config(config, _overrides(args))
    if args.command in ("train", "run"):
        out = run_train(cfg)
        print(out / "checkpoint.json")
    if args.command in ("analyze", "run"):
        manifest = run_analyze(cfg, getattr(args, "checkpoint", None))
        print(json.dumps(manifest["summary"], indent=2, sort_keys=True))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (HarlensError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
