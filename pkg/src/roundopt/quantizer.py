"""Symmetric per-tensor quantization grids and elementary rounding.

``round`` uses half-away-from-zero ties throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .tensor import DimensionError, LayerSpec, layer_preactivation

MIN_MAX = "min_max"
WEIGHT_MSE = "weight_mse"
PREACT_MSE = "preact_mse"
GRID_POLICIES = (MIN_MAX, WEIGHT_MSE, PREACT_MSE)

# scale search for the MSE policies, as multiples of the min-max scale
SEARCH_LOW, SEARCH_HIGH, SEARCH_POINTS = 0.2, 1.2, 100


class DegenerateTensorError(ValueError):
    pass


@dataclass(frozen=True)
class QuantGrid:
    scale: float
    n: int
    p: int
    bits: int

    def __post_init__(self):
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise ValueError(f"grid scale must be positive and finite, got {self.scale}")
        if not self.n < 0 < self.p:
            raise ValueError(f"clip thresholds must satisfy n < 0 < p, got n={self.n}, p={self.p}")
        if self.bits < 2:
            raise ValueError(f"bits must be >= 2, got {self.bits}")

    @classmethod
    def symmetric(cls, bits: int, scale: float) -> "QuantGrid":
        return cls(float(scale), -(2 ** (bits - 1)), 2 ** (bits - 1) - 1, int(bits))

    def to_dict(self) -> dict:
        return {"scale": self.scale, "n": self.n, "p": self.p, "bits": self.bits}


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _apply(W, g: QuantGrid, fn) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    # + 0.0 folds -0.0 (ceil of a small negative) into 0.0 so grid values are byte-canonical
    return g.scale * (np.clip(fn(W / g.scale), g.n, g.p) + 0.0)


def quantize_nearest(W, g: QuantGrid) -> np.ndarray:
    return _apply(W, g, round_half_away)


def quantize_floor(W, g: QuantGrid) -> np.ndarray:
    return _apply(W, g, np.floor)


def quantize_ceil(W, g: QuantGrid) -> np.ndarray:
    return _apply(W, g, np.ceil)


def quantize_stochastic(W, g: QuantGrid, seed) -> np.ndarray:
    """Round up with probability equal to the fractional part of ``clip(W/s, n, p)``."""
    return apply_mask(W, g, stochastic_mask(W, g, seed))


def stochastic_mask(W, g: QuantGrid, seed) -> np.ndarray:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    t = np.clip(np.asarray(W, dtype=np.float64) / g.scale, g.n, g.p)
    frac = t - np.floor(t)
    return (rng.random(t.shape) < frac) & free_mask(W, g)


def free_mask(W, g: QuantGrid) -> np.ndarray:
    """Elements with a genuine up/down choice (floor and ceil differ after clipping)."""
    return quantize_floor(W, g) != quantize_ceil(W, g)


def fractional_part(W, g: QuantGrid) -> np.ndarray:
    t = np.asarray(W, dtype=np.float64) / g.scale
    return t - np.floor(t)


def nearest_mask(W, g: QuantGrid) -> np.ndarray:
    """The mask that reproduces :func:`quantize_nearest` under :func:`apply_mask`."""
    t = np.asarray(W, dtype=np.float64) / g.scale
    return (round_half_away(t) > np.floor(t)) & free_mask(W, g)


def apply_mask(W, g: QuantGrid, m) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    m = np.asarray(m)
    if m.shape != W.shape:
        raise DimensionError(f"mask shape {m.shape} != weight shape {W.shape}")
    return np.where(m.astype(bool), quantize_ceil(W, g), quantize_floor(W, g))


def min_max_scale(W, bits: int) -> float:
    W = np.asarray(W, dtype=np.float64)
    peak = float(np.max(np.abs(W))) if W.size else 0.0
    if peak == 0.0 or not np.isfinite(peak):
        raise DegenerateTensorError("degenerate tensor: cannot fit a grid to an all-zero weight tensor")
    return peak / max(2 ** (bits - 1), 2 ** (bits - 1) - 1)


def candidate_scales(base: float) -> np.ndarray:
    # base itself is included so the search can never do worse than min-max
    grid = np.linspace(SEARCH_LOW, SEARCH_HIGH, SEARCH_POINTS) * base
    return np.unique(np.append(grid, base))


def fit_grid(W, bits: int, policy: str = WEIGHT_MSE, x=None, layer: Optional[LayerSpec] = None,
             x_q=None) -> QuantGrid:
    """Choose the scale of a symmetric ``bits``-bit grid for ``W``.

    ``preact_mse`` needs calibration inputs ``x``. The preactivation error is
    measured with ``layer``'s forward pass when given (conv layers need it),
    otherwise ``W`` is treated as a dense ``(out, in)`` matrix. ``x_q`` is the
    quantized-path input for the asymmetric error; it defaults to ``x``.
    """
    if policy not in GRID_POLICIES:
        raise ValueError(f"unknown grid policy {policy!r}; expected one of {GRID_POLICIES}")
    W = np.asarray(W, dtype=np.float64)
    base = min_max_scale(W, bits)
    if policy == MIN_MAX:
        return QuantGrid.symmetric(bits, base)

    if policy == WEIGHT_MSE:
        def err(g):
            return float(np.sum((W - quantize_nearest(W, g)) ** 2))
    else:
        if x is None:
            raise ValueError("preact_mse grid policy requires calibration input x")
        if layer is None:
            layer = LayerSpec("dense", W)
        x = np.asarray(x, dtype=np.float64)
        xq = x if x_q is None else np.asarray(x_q, dtype=np.float64)
        ref = layer_preactivation(layer.with_weight(W, None), x)

        def err(g):
            out = layer_preactivation(layer.with_weight(quantize_nearest(W, g), None), xq)
            return float(np.sum((ref - out) ** 2))

    return _argmin_grid(bits, candidate_scales(base), err)


def _argmin_grid(bits: int, scales: np.ndarray, err: Callable[[QuantGrid], float]) -> QuantGrid:
    best, best_err = None, np.inf
    for s in scales:
        g = QuantGrid.symmetric(bits, s)
        e = err(g)
        if e < best_err:
            best, best_err = g, e
    return best
