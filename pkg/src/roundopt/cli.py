"""Command-line entry point: ``python -m roundopt <command>`` or ``roundopt <command>``.

Exit codes: 0 success, 1 runtime or file failure, 2 usage error (bad flag,
unknown choice, contradictory options, invalid config key).

Settings resolve as built-in defaults, then the ``--config`` JSON file, then
explicit flags. The thread count defaults to ``$ROUNDOPT_THREADS`` (or 1).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, eval as ev, model_io
from .config import GRID_ALIASES, METHODS, ConfigError, RunConfig, default_threads, load_config_file, normalize_grid
from .model import ModelGraph
from .quantizer import fit_grid

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("roundopt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


# ---- helpers ----------------------------------------------------------------

def _load_model(path) -> ModelGraph:
    return model_io.load_model(path or data.bundled_model_path())


def _load_data(path, default, need_labels: bool):
    x, y = model_io.load_calib(path or default)
    if need_labels and y is None:
        raise UsageError(f"{path or default} has no labels, but this command needs labeled data")
    return x, y


def _check_layer(model: ModelGraph, index: int) -> int:
    if not -len(model.layers) <= index < len(model.layers):
        raise UsageError(f"--layer {index} out of range for a {len(model.layers)}-layer model")
    return index % len(model.layers)


def _threads(args) -> int:
    if args.threads is not None:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        return args.threads
    return default_threads()


def _resolve_config(args) -> RunConfig:
    """Defaults < config file < flags."""
    d = load_config_file(args.config) if getattr(args, "config", None) else {}
    cfg = RunConfig.from_dict(d)
    flags = {}
    for key in ("bits", "method", "seed", "iterations", "batch_size", "lam", "calib_samples"):
        v = getattr(args, key, None)
        if v is not None:
            flags[key] = v
    if getattr(args, "grid", None) is not None:
        flags["grid_policy"] = args.grid
    if getattr(args, "bias_correction", False):
        flags["bias_correction"] = True
    flags["threads"] = _threads(args)
    return RunConfig.from_dict(flags, base=cfg)


def _emit(text: str, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _grid_for(model: ModelGraph, index: int, bits: int, policy: str, x_calib):
    x_in = model.forward(x_calib, 0, index)
    return fit_grid(model.layers[index].weight, bits, normalize_grid(policy), x=x_in, layer=model.layers[index])


# ---- commands ---------------------------------------------------------------

def cmd_quantize(args) -> int:
    from .pipeline import quantize_model

    cfg = _resolve_config(args)
    model_path = Path(args.model) if args.model else data.bundled_model_path()
    out = Path(args.out)
    if (out / "model.json").resolve() == model_path.resolve():
        raise UsageError("--out would overwrite the input model; choose another directory")
    model = model_io.load_model(model_path)
    x, _ = _load_data(args.calib, data.bundled_calib_path(), need_labels=False)

    def progress(rec):
        log.info("layer %d (%s): local mse %.6g (nearest %.6g), %.0f ms", rec.index, rec.name, rec.local_mse,
                 rec.nearest_local_mse, rec.wall_time_ms)

    result = quantize_model(model, x, cfg, progress=progress)
    if args.no_timing:
        for rec in result.layers:
            rec.wall_time_ms = 0.0
    out.mkdir(parents=True, exist_ok=True)
    model_io.save_model(result.model, out / "model.json")
    masks = {rec.name: rec.mask for rec in result.layers if rec.mask is not None}
    model_io.save_masks(out / "masks", masks)
    model_io.write_report(out / "report.csv", model_io.report_rows(result), result.config)
    print(f"wrote {out / 'model.json'}, {len(masks)} mask(s), {out / 'report.csv'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = _load_model(args.model)
    x, y = _load_data(args.data, data.bundled_test_path(), need_labels=True)
    print(f"accuracy {ev.accuracy(model, x, y):.6f} ({len(x)} samples)")
    ref = _load_model(args.reference)
    if [l.weight.shape for l in ref.layers] != [l.weight.shape for l in model.layers]:
        print("reference architecture differs; per-layer mse skipped")
        return EXIT_OK
    ref_out = ref.layer_inputs(x)[1:]
    out = model.layer_inputs(x)[1:]
    for layer, a, b in zip(model.layers, ref_out, out):
        d = (a - b).reshape(len(x), -1)
        print(f"layer {layer.name}: output mse vs reference {float(np.mean(np.sum(d * d, axis=1))):.6g}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    model = _load_model(args.model)
    index = _check_layer(model, args.layer)
    xc, _ = _load_data(args.calib, data.bundled_calib_path(), need_labels=False)
    x, y = _load_data(args.data, data.bundled_test_path(), need_labels=True)
    grid = _grid_for(model, index, args.bits, args.grid, xc)
    rows = ev.rounding_sweep(model, index, grid, x, y, n_samples=args.samples, seed=args.seed)
    header = {"layer": model.layers[index].name, "bits": args.bits, "grid": normalize_grid(args.grid),
              "seed": args.seed, "samples": args.samples, "std": "unbiased (n-1)"}
    _emit(ev.to_csv(rows, ("scheme", "accuracy", "accuracy_std", "n"), header), args.out)
    return EXIT_OK


def cmd_correlate(args) -> int:
    model = _load_model(args.model)
    index = _check_layer(model, args.layer)
    xc, yc = _load_data(args.calib, data.bundled_calib_path(), need_labels=True)
    x, y = _load_data(args.data, data.bundled_test_path(), need_labels=True)
    grid = _grid_for(model, index, args.bits, args.grid, xc)
    res = ev.cost_accuracy_correlation(model, index, grid, xc, yc, x, y, n_samples=args.samples, seed=args.seed,
                                       include_gradient=not args.hessian_only)
    rho = "undefined" if res.spearman is None else repr(res.spearman)
    rows = [{"sample": i, "cost": repr(c), "accuracy": repr(a)} for i, (c, a) in enumerate(res.points())]
    header = {"layer": model.layers[index].name, "bits": args.bits, "grid": normalize_grid(args.grid),
              "seed": args.seed, "samples": args.samples, "gradient_term": not args.hessian_only, "spearman": rho}
    _emit(ev.to_csv(rows, ("sample", "cost", "accuracy"), header), args.out)
    print(f"spearman {rho}", file=sys.stderr if not args.out else sys.stdout)
    return EXIT_OK


def cmd_ablate(args) -> int:
    matrix = load_config_file(args.matrix)
    allowed = {"methods", "grids", "variants", "seeds", "base"}
    extra = set(matrix) - allowed
    if extra:
        raise ConfigError(f"unknown matrix key(s) {sorted(extra)}; expected {sorted(allowed)}")
    base = RunConfig.from_dict(matrix.get("base", {}))
    if args.threads is not None:
        base.threads = _threads(args)
    methods = matrix.get("methods", ["nearest", "adaround"])
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown method(s) {bad}")
    grids = [normalize_grid(g) for g in matrix.get("grids", ["wmse"])]
    seeds = matrix.get("seeds", 5)
    seeds = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    model = _load_model(args.model)
    xc, _ = _load_data(args.calib, data.bundled_calib_path(), need_labels=False)
    x, y = _load_data(args.data, data.bundled_test_path(), need_labels=True)
    rows, summary = ev.ablation_driver(
        model, xc, x, y, methods, grids, matrix.get("variants", ["asymmetric-relu"]), seeds, base,
        timing=not args.no_timing, progress=lambda rid, s, a: log.info("%s seed %s: accuracy %.4f", rid, s, a))
    header = {"matrix": matrix, "base": base.to_dict()}
    _emit(ev.to_csv(rows, ev.ABLATION_COLUMNS, header), args.out)
    summary_text = ev.to_csv(summary, ev.SUMMARY_COLUMNS, {"std": "unbiased (n-1)"})
    if args.summary:
        Path(args.summary).write_text(summary_text)
    else:
        sys.stderr.write(summary_text)
    return EXIT_OK


def cmd_make_bundle(args) -> int:
    from .model import build_tiny_cnn, train

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    x_train, y_train = data.generate(8000, data.TRAIN_SEED)
    x_test, y_test = data.generate(4000, data.TEST_SEED)
    model = build_tiny_cnn(np.random.default_rng(0))
    train(model, x_train, y_train, epochs=args.epochs, seed=0, log=log.info)
    model = data.to_float32(model)
    model_io.save_model(model, out / "tiny_cnn" / "model.json")
    model_io.save_calib(out / "calib.bin", x_train[:1024], y_train[:1024])
    model_io.save_calib(out / "test.bin", x_test, y_test)
    print(f"float accuracy {ev.accuracy(model, x_test, y_test):.4f}; wrote bundle to {out}")
    return EXIT_OK


# ---- parser -----------------------------------------------------------------

def _add_common(p, data_flags=True):
    p.add_argument("--model", help="model header (JSON); defaults to the bundled tiny CNN")
    if data_flags:
        p.add_argument("--calib", help="calibration file; defaults to the bundled set")
        p.add_argument("--data", help="labeled evaluation file; defaults to the bundled test set")
    p.add_argument("--threads", type=int, help="worker cap (default $ROUNDOPT_THREADS or 1)")


def build_parser() -> argparse.ArgumentParser:
    grids = sorted(GRID_ALIASES)
    parser = _Parser(prog="roundopt", description="Post-training weight rounding toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("quantize", help="quantize a model layer by layer")
    p.add_argument("--model")
    p.add_argument("--calib")
    p.add_argument("--bits", type=int)
    p.add_argument("--grid", choices=grids)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--config", help="JSON file of run settings; flags take precedence")
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--calib-samples", dest="calib_samples", type=int)
    p.add_argument("--bias-correction", action="store_true", help="also apply empirical bias correction")
    p.add_argument("--threads", type=int)
    p.add_argument("--no-timing", action="store_true", help="write wall times as 0 for reproducible reports")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("evaluate", help="accuracy and per-layer output mse against a reference model")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--reference", help="float reference model; defaults to the bundled tiny CNN")
    p.set_defaults(func=cmd_evaluate)

    for name, func, default_samples in (("sweep", cmd_sweep, 100), ("correlate", cmd_correlate, 100)):
        p = sub.add_parser(name, help="rounding-scheme sweep on one layer" if name == "sweep"
                           else "task-loss QUBO cost vs accuracy on one layer")
        _add_common(p)
        p.add_argument("--layer", type=int, default=0)
        p.add_argument("--samples", type=int, default=default_samples)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--bits", type=int, default=4)
        p.add_argument("--grid", choices=grids, default="wmse")
        p.add_argument("--out", help="CSV path; stdout if omitted")
        if name == "correlate":
            p.add_argument("--hessian-only", action="store_true", help="drop the gradient term from the cost")
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="run a method x grid x objective matrix")
    _add_common(p)
    p.add_argument("--matrix", required=True, help="JSON: methods, grids, variants, seeds, base")
    p.add_argument("--out", help="per-run CSV; stdout if omitted")
    p.add_argument("--summary", help="per-cell mean/std CSV; stderr if omitted")
    p.add_argument("--no-timing", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("make-bundle", help="regenerate the bundled dataset and trained model")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=40)
    p.set_defaults(func=cmd_make_bundle)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s",
                        stream=sys.stderr)
    if getattr(args, "samples", 1) is not None and getattr(args, "samples", 1) < 1:
        print("roundopt: error: --samples must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"roundopt: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, model_io.FormatError) as e:
        print(f"roundopt: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, ArithmeticError) as e:
        print(f"roundopt: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
