"""Sequential whole-model quantization.

Layers are processed in order. For each one the float-path input ``x_fp``
and the quantized-prefix input ``x_q`` are cached for the whole calibration
set, a grid is fitted, the chosen rounding method runs, and the quantized
weights are committed before the next layer's ``x_q`` is produced.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import qubo
from .adaround import optimize_layer, optimize_layer_ste
from .bias_correction import apply_bias_delta, bias_correct
from .config import RunConfig
from .model import ModelGraph
from .quantizer import (
    QuantGrid,
    apply_mask,
    fit_grid,
    free_mask,
    nearest_mask,
    stochastic_mask,
)
from .tensor import LayerSpec, activate, layer_preactivation

log = logging.getLogger(__name__)


@dataclass
class LayerRecord:
    index: int
    name: str
    method: str
    grid: QuantGrid
    mask: Optional[np.ndarray]
    local_mse: float
    nearest_local_mse: float
    wall_time_ms: float
    diagnostics: dict = field(default_factory=dict)


@dataclass
class QuantizationResult:
    model: ModelGraph
    layers: list[LayerRecord]
    config: dict


def local_error(layer: LayerSpec, quantized: LayerSpec, x_fp, x_q) -> float:
    """Per-sample mean of ``||f(W x_fp + b) - f(W_hat x_q + b_hat)||^2``, with the layer's activation."""
    ref = activate(layer_preactivation(layer, x_fp), layer.activation)
    out = activate(layer_preactivation(quantized, x_q), quantized.activation)
    d = (ref - out).reshape(len(x_fp), -1)
    return float(np.mean(np.sum(d * d, axis=1)))


def layer_seed(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def solve_layer_qubo(layer: LayerSpec, grid: QuantGrid, x_fp, x_q, cfg: RunConfig, exhaustive: bool,
                     seed: int, index: int) -> tuple[np.ndarray, dict]:
    if cfg.use_asymmetric:
        problems = qubo.layer_asymmetric_qubos(layer, grid, x_fp, x_q)
    else:
        problems = qubo.layer_local_qubos(layer, grid, x_fp)
    rows = qubo.channel_rows(layer, layer.weight)
    params = cfg.ce()

    def solve(k):
        p = problems[k]
        if exhaustive:
            bits, cost = qubo.solve_exhaustive(p)
        else:
            init = qubo.default_init_probs(rows[k], grid, p)
            bits, cost = qubo.solve_cross_entropy(p, init, params, seed=np.random.default_rng([seed, index, k]))
        return qubo.expand_bits(p, bits, rows.shape[1]), cost

    with ThreadPoolExecutor(max_workers=max(1, cfg.threads)) as pool:
        results = list(pool.map(solve, range(len(problems))))
    mask_rows = np.stack([r[0] for r in results])
    mask = qubo.rows_to_weight(layer, mask_rows)
    return mask, {"qubo_costs": [r[1] for r in results], "qubo_dims": [p.dim for p in problems]}


def quantize_layer(layer: LayerSpec, grid: QuantGrid, x_fp, x_q, cfg: RunConfig, index: int):
    """Round one layer; returns ``(quantized layer, mask or None, diagnostics)``."""
    W = layer.weight
    method = cfg.method
    diagnostics = {}
    mask = None
    if method in ("nearest", "bias-corrected"):
        mask = nearest_mask(W, grid)
    elif method == "floor":
        mask = np.zeros(W.shape, dtype=bool)
    elif method == "ceil":
        mask = free_mask(W, grid)
    elif method == "stochastic":
        mask = stochastic_mask(W, grid, layer_seed(cfg.seed, index))
    elif method in ("qubo-ce", "qubo-exhaustive"):
        mask, diagnostics = solve_layer_qubo(layer, grid, x_fp, x_q, cfg, method == "qubo-exhaustive",
                                             cfg.seed, index)
    elif method == "adaround":
        mask, diagnostics = optimize_layer(layer, grid, x_fp, x_q, cfg.adaround(), layer_seed(cfg.seed, index))
    elif method == "ste":
        W_hat, diagnostics = optimize_layer_ste(layer, grid, x_fp, x_q, cfg.adaround(),
                                                layer_seed(cfg.seed, index))
    else:
        raise ValueError(f"unknown method {method!r}")
    if mask is not None:
        W_hat = apply_mask(W, grid, mask)
    quantized = layer.with_weight(W_hat)
    if method == "bias-corrected" or cfg.bias_correction:
        delta = bias_correct(layer, quantized, x_fp, x_q)
        quantized = apply_bias_delta(quantized, delta)
        diagnostics["bias_delta"] = delta
    return quantized, mask, diagnostics


def quantize_model(model: ModelGraph, x_calib, config: Optional[RunConfig] = None,
                   progress=None) -> QuantizationResult:
    cfg = config or RunConfig()
    x = np.asarray(x_calib, dtype=np.float64)
    if cfg.calib_samples is not None:
        x = x[:cfg.calib_samples]
    if len(x) == 0:
        raise ValueError("calibration set is empty")
    x_fp = x
    x_q = x
    out_layers = []
    records = []
    for i, layer in enumerate(model.layers):
        t0 = time.perf_counter()
        grid = fit_grid(layer.weight, cfg.bits, cfg.grid_policy, x=x_fp, layer=layer, x_q=x_q)
        quantized, mask, diag = quantize_layer(layer, grid, x_fp, x_q, cfg, i)
        elapsed = (time.perf_counter() - t0) * 1000.0
        nearest = layer.with_weight(apply_mask(layer.weight, grid, nearest_mask(layer.weight, grid)))
        rec = LayerRecord(i, layer.name or f"layer{i}", cfg.method, grid, mask,
                          local_error(layer, quantized, x_fp, x_q), local_error(layer, nearest, x_fp, x_q),
                          elapsed, diag)
        records.append(rec)
        out_layers.append(quantized)
        if progress is not None:
            progress(rec)
        x_fp = activate(layer_preactivation(layer, x_fp), layer.activation)
        x_q = activate(layer_preactivation(quantized, x_q), quantized.activation)
    qmodel = ModelGraph(out_layers, tuple(model.input_shape), dict(model.meta))
    qmodel.meta["quantization"] = {"bits": cfg.bits, "grids": [r.grid.to_dict() for r in records]}
    return QuantizationResult(qmodel, records, cfg.to_dict())
