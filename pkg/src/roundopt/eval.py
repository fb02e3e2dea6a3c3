"""Accuracy and the experiment drivers: rounding sweep, cost/accuracy correlation, ablation matrix."""

from __future__ import annotations

import csv
import io
import itertools
import json
import time
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.stats import spearmanr

from . import qubo
from .config import RunConfig
from .model import ModelGraph
from .pipeline import quantize_model
from .quantizer import QuantGrid, apply_mask, free_mask, nearest_mask, stochastic_mask

ABLATION_COLUMNS = ("run_id", "layer", "method", "grid", "bits", "seed", "accuracy", "local_mse", "wall_time_ms")
SUMMARY_COLUMNS = ("run_id", "method", "grid", "variant", "bits", "n_seeds", "accuracy_mean", "accuracy_std")

# objective variants of the ablation matrix, as RunConfig overrides
VARIANTS = {
    "symmetric": {"use_asymmetric": False, "use_activation_in_loss": False},
    "asymmetric": {"use_asymmetric": True, "use_activation_in_loss": False},
    "asymmetric-relu": {"use_asymmetric": True, "use_activation_in_loss": True},
}


def accuracy(model: ModelGraph, x, labels) -> float:
    x = np.asarray(x)
    labels = np.asarray(labels)
    if len(x) == 0:
        raise ValueError("cannot compute accuracy on an empty dataset")
    if labels.shape != (len(x),):
        raise ValueError(f"labels shape {labels.shape} does not match {len(x)} samples")
    return float(np.mean(model.predict(x).argmax(axis=1) == labels))


def _with_mask(model: ModelGraph, index: int, grid: QuantGrid, mask) -> ModelGraph:
    layer = model.layers[index]
    return model.replace_layer(index, layer.with_weight(apply_mask(layer.weight, grid, mask)))


def rounding_sweep(model: ModelGraph, layer_index: int, grid: QuantGrid, x, labels,
                   n_samples: int = 100, seed: int = 0) -> list[dict]:
    """Accuracy with one layer rounded by each fixed scheme and by ``n_samples`` stochastic masks.

    Every other layer stays in float. The stochastic row reports the mean and
    the unbiased (n-1) standard deviation; the best stochastic mask gets its
    own row.
    """
    W = model.layers[layer_index].weight
    rows = []
    for scheme, mask in (("nearest", nearest_mask(W, grid)), ("ceil", free_mask(W, grid)),
                         ("floor", np.zeros(W.shape, dtype=bool))):
        rows.append({"scheme": scheme, "accuracy": accuracy(_with_mask(model, layer_index, grid, mask), x, labels),
                     "accuracy_std": 0.0, "n": 1})
    if n_samples > 0:
        rng = np.random.default_rng(seed)
        accs = np.array([accuracy(_with_mask(model, layer_index, grid, stochastic_mask(W, grid, rng)), x, labels)
                         for _ in range(n_samples)])
        std = float(accs.std(ddof=1)) if n_samples > 1 else 0.0
        rows.append({"scheme": "stochastic", "accuracy": float(accs.mean()), "accuracy_std": std, "n": n_samples})
        rows.append({"scheme": "stochastic-best", "accuracy": float(accs.max()), "accuracy_std": 0.0, "n": n_samples})
    return rows


@dataclass
class CorrelationResult:
    costs: np.ndarray
    accuracies: np.ndarray
    spearman: Optional[float]  # None when undefined (a constant column)

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.costs.tolist(), self.accuracies.tolist()))


def spearman_or_none(a, b) -> Optional[float]:
    a, b = np.asarray(a), np.asarray(b)
    if len(a) < 2 or np.all(a == a[0]) or np.all(b == b[0]):
        return None
    return float(spearmanr(a, b)[0])


def cost_accuracy_correlation(model: ModelGraph, layer_index: int, grid: QuantGrid, x_calib, y_calib,
                              x_eval, y_eval, n_samples: int = 100, seed: int = 0,
                              include_gradient: bool = True, problem: Optional[qubo.QuboProblem] = None
                              ) -> CorrelationResult:
    """Task-loss QUBO cost against accuracy for stochastic masks of one layer.

    The QUBO is the second-order expansion of the calibration cross-entropy
    around the float weights. The gradient term is kept by default: a small
    network trained to a few epochs is not at a stationary point of the loss
    on its calibration batch.
    """
    if problem is None:
        problem = qubo.build_taskloss_qubo(model, layer_index, grid, x_calib, y_calib,
                                           include_gradient=include_gradient)
    W = model.layers[layer_index].weight
    rng = np.random.default_rng(seed)
    costs, accs = np.empty(n_samples), np.empty(n_samples)
    for k in range(n_samples):
        mask = stochastic_mask(W, grid, rng)
        costs[k] = problem.cost(mask.ravel()[problem.variables])
        accs[k] = accuracy(_with_mask(model, layer_index, grid, mask), x_eval, y_eval)
    return CorrelationResult(costs, accs, spearman_or_none(costs, accs))


def _cells(methods, grids, variants) -> Iterable[tuple[str, str, str]]:
    return itertools.product(methods, grids, variants)


def ablation_driver(model: ModelGraph, x_calib, x_eval, y_eval, methods: Sequence[str],
                    grids: Sequence[str], variants: Sequence[str] = ("asymmetric-relu",),
                    seeds: Sequence[int] = range(5), base: Optional[RunConfig] = None,
                    timing: bool = True, progress=None) -> tuple[list[dict], list[dict]]:
    """Run every (method, grid, objective variant) cell for every seed.

    Returns ``(rows, summary)``: ``rows`` follows :data:`ABLATION_COLUMNS` with
    one row per layer per seed plus a ``layer="all"`` row carrying the model
    accuracy; ``summary`` holds the per-cell mean and unbiased std of accuracy.
    With ``timing=False`` wall times are written as 0 so reruns give identical files.
    """
    base = base or RunConfig()
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ValueError(f"unknown objective variant(s) {unknown}; expected {sorted(VARIANTS)}")
    rows, summary = [], []
    for method, grid, variant in _cells(methods, grids, variants):
        run_id = f"{method}/{grid}/{variant}/{base.bits}b"
        accs = []
        for seed in seeds:
            d = base.to_dict()
            d.update(VARIANTS[variant], method=method, grid_policy=grid, seed=int(seed))
            cfg = RunConfig.from_dict(d)
            t0 = time.perf_counter()
            result = quantize_model(model, x_calib, cfg)
            total_ms = (time.perf_counter() - t0) * 1000.0 if timing else 0.0
            acc = accuracy(result.model, x_eval, y_eval)
            accs.append(acc)
            for rec in result.layers:
                rows.append({"run_id": run_id, "layer": rec.name, "method": method, "grid": cfg.grid_policy,
                             "bits": cfg.bits, "seed": seed, "accuracy": repr(acc),
                             "local_mse": repr(float(rec.local_mse)),
                             "wall_time_ms": f"{rec.wall_time_ms if timing else 0.0:.3f}"})
            rows.append({"run_id": run_id, "layer": "all", "method": method, "grid": cfg.grid_policy,
                         "bits": cfg.bits, "seed": seed, "accuracy": repr(acc), "local_mse": "",
                         "wall_time_ms": f"{total_ms:.3f}"})
            if progress is not None:
                progress(run_id, seed, acc)
        a = np.array(accs)
        summary.append({"run_id": run_id, "method": method, "grid": grid, "variant": variant, "bits": base.bits,
                        "n_seeds": len(a), "accuracy_mean": repr(float(a.mean())),
                        "accuracy_std": repr(float(a.std(ddof=1))) if len(a) > 1 else "0.0"})
    return rows, summary


def to_csv(rows: list[dict], columns: Sequence[str], header: Optional[dict] = None) -> str:
    """CSV text; ``header`` entries become leading ``# key=value`` lines."""
    buf = io.StringIO()
    for key in sorted(header or {}):
        buf.write(f"# {key}={json.dumps(header[key])}\n")
    w = csv.DictWriter(buf, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()
