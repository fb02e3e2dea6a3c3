"""Continuous relaxation of the rounding problem (AdaRound) and the STE baseline.

A soft variable ``V`` per weight picks a point between rounding down and up,
``W_soft = s * clip(floor(W/s) + h(V), n, p)``, and the layer's output
reconstruction error is minimised with Adam while an annealed regulariser
drives every ``h(V)`` to 0 or 1.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .optim import Adam
from .quantizer import QuantGrid, free_mask, fractional_part, quantize_nearest, round_half_away
from .tensor import IDENTITY, RELU, LayerSpec, layer_input_rows

log = logging.getLogger(__name__)

ZETA = 1.1
GAMMA = -0.1

RECT_SIGMOID = "rect_sigmoid"
SIGMOID = "sigmoid"
SIGMOID_TEMPERATURE = "sigmoid_temperature"
H_FUNCTIONS = (RECT_SIGMOID, SIGMOID, SIGMOID_TEMPERATURE)
LAMBDA_REFERENCES = ("nearest", "warmup")


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def rect_sigmoid(V, zeta: float = ZETA, gamma: float = GAMMA) -> np.ndarray:
    return np.clip(sigmoid(V) * (zeta - gamma) + gamma, 0.0, 1.0)


def rect_sigmoid_grad(V, zeta: float = ZETA, gamma: float = GAMMA) -> np.ndarray:
    sig = sigmoid(V)
    raw = sig * (zeta - gamma) + gamma
    return np.where((raw > 0.0) & (raw < 1.0), sig * (1.0 - sig) * (zeta - gamma), 0.0)


def soft_quantize(W, g: QuantGrid, V, h=None) -> np.ndarray:
    """``s * clip(floor(W/s) + h(V), n, p)``; pass ``h`` to skip the rectified sigmoid."""
    W = np.asarray(W, dtype=np.float64)
    h = rect_sigmoid(V) if h is None else h
    return g.scale * np.clip(np.floor(W / g.scale) + h, g.n, g.p)


def f_reg(V, beta: float, h=None) -> float:
    """Sum of ``1 - |2h - 1|^beta``; zero exactly when every ``h`` is binary."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    h = rect_sigmoid(V) if h is None else h
    return float(np.sum(1.0 - np.abs(2.0 * h - 1.0) ** beta))


def f_reg_grad_h(h, beta: float) -> np.ndarray:
    t = 2.0 * h - 1.0
    a = np.abs(t)
    # derivative of 1 - |t|^beta w.r.t. h, defined as 0 at t == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        g = -2.0 * beta * np.where(a > 0, a ** (beta - 1.0), 0.0) * np.sign(t)
    return g


def init_V(W, g: QuantGrid, eps: float = 1e-6, zeta: float = ZETA, gamma: float = GAMMA) -> np.ndarray:
    """Warm start: ``h(V)`` equals the fractional part of ``W/s``."""
    r = fractional_part(W, g)
    u = np.clip((r - gamma) / (zeta - gamma), eps, 1.0 - eps)
    return np.log(u) - np.log1p(-u)


@dataclass
class AnnealSchedule:
    """Regulariser off for the warmup, then beta decays linearly from start to end."""

    beta_start: float = 20.0
    beta_end: float = 2.0
    warmup_fraction: float = 0.2
    total_iterations: int = 10_000

    def __post_init__(self):
        if not self.beta_start >= self.beta_end > 0:
            raise ValueError(f"need beta_start >= beta_end > 0, got {self.beta_start}, {self.beta_end}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError(f"warmup_fraction must be in [0, 1), got {self.warmup_fraction}")

    @property
    def warmup_iterations(self) -> int:
        return int(self.warmup_fraction * self.total_iterations)

    def regularize(self, it: int) -> bool:
        return it >= self.warmup_iterations

    def beta(self, it: int) -> float:
        w = self.warmup_iterations
        if it < w:
            return self.beta_start
        span = max(self.total_iterations - w, 1)
        frac = min((it - w) / span, 1.0)
        return self.beta_start + frac * (self.beta_end - self.beta_start)


@dataclass
class AdaRoundConfig:
    iterations: int = 10_000
    batch_size: int = 32
    lam: float = 1e4
    beta_start: float = 20.0
    beta_end: float = 2.0
    warmup_fraction: float = 0.2
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    use_asymmetric: bool = True
    use_activation_in_loss: bool = True
    h_function: str = RECT_SIGMOID
    temperature_start: float = 1.0
    temperature_end: float = 0.05
    # error that lam * f_reg is matched to at the end of warmup: "nearest" rounding or the "warmup" soft weights
    lambda_reference: str = "nearest"
    checkpoint_every: int = 100
    debug: bool = False

    def __post_init__(self):
        if self.h_function not in H_FUNCTIONS:
            raise ValueError(f"unknown h_function {self.h_function!r}; expected one of {H_FUNCTIONS}")
        if self.lambda_reference not in LAMBDA_REFERENCES:
            raise ValueError(f"unknown lambda_reference {self.lambda_reference!r}; expected one of {LAMBDA_REFERENCES}")

    def schedule(self) -> AnnealSchedule:
        return AnnealSchedule(self.beta_start, self.beta_end, self.warmup_fraction, self.iterations)

    def to_dict(self) -> dict:
        return asdict(self)


# -- loss --------------------------------------------------------------------

def _weight_matrix(layer: LayerSpec, W: np.ndarray) -> np.ndarray:
    return W.T if layer.kind == "dense" else W.reshape(-1, W.shape[-1])


def _from_matrix(layer: LayerSpec, G: np.ndarray) -> np.ndarray:
    return G.T if layer.kind == "dense" else G.reshape(layer.weight.shape)


class _Reconstruction:
    """Cached inputs and targets for one layer: rows ``(N, P, K)``, targets ``(N, P, C)``."""

    def __init__(self, layer: LayerSpec, x_fp, x_q, activation: str):
        self.layer = layer
        self.activation = activation
        n = len(x_fp)
        rows_fp = layer_input_rows(layer, x_fp)
        self.rows = rows_fp.reshape(n, -1, rows_fp.shape[-1]) if x_q is None else \
            layer_input_rows(layer, x_q).reshape(n, -1, rows_fp.shape[-1])
        z = rows_fp @ layer.weight_matrix()
        if layer.bias is not None:
            z = z + layer.bias
        if activation == RELU:
            z = np.maximum(z, 0.0)
        self.target = z.reshape(n, -1, z.shape[-1])
        self.n = n

    def loss_grad(self, W_hat: np.ndarray, idx=None) -> tuple[float, np.ndarray]:
        """Squared error summed over the (sub)batch and its gradient w.r.t. ``W_hat``."""
        rows = self.rows if idx is None else self.rows[idx]
        target = self.target if idx is None else self.target[idx]
        R = rows.reshape(-1, rows.shape[-1])
        z = R @ _weight_matrix(self.layer, W_hat)
        if self.layer.bias is not None:
            z = z + self.layer.bias
        out = np.maximum(z, 0.0) if self.activation == RELU else z
        diff = out - target.reshape(-1, target.shape[-1])
        dz = 2.0 * diff
        if self.activation == RELU:
            dz = dz * (z > 0)
        return float(np.sum(diff * diff)), _from_matrix(self.layer, R.T @ dz)


def _h_and_grad(V, cfg: AdaRoundConfig, temperature: float):
    if cfg.h_function == RECT_SIGMOID:
        return rect_sigmoid(V), rect_sigmoid_grad(V)
    if cfg.h_function == SIGMOID:
        s = sigmoid(V)
        return s, s * (1.0 - s)
    s = sigmoid(V / temperature)
    return s, s * (1.0 - s) / temperature


def _soft_grad(W, g: QuantGrid, h, dW_soft, dh):
    t = np.floor(W / g.scale) + h
    active = (t >= g.n) & (t <= g.p)
    return dW_soft * g.scale * active * dh


def layer_loss(layer: LayerSpec, g: QuantGrid, V, x_fp, x_q=None, lam: float = 0.0, beta: float = 2.0,
               activation: Optional[str] = None) -> tuple[float, np.ndarray]:
    """Reconstruction loss ``||f(W x_fp) - f(W_soft x_q)||^2 + lam * f_reg(V, beta)`` and d/dV.

    ``activation`` defaults to the layer's own; ``x_q`` defaults to ``x_fp``.
    Gradients are zero wherever either clip saturates.
    """
    act = layer.activation if activation is None else activation
    rec = _Reconstruction(layer, np.asarray(x_fp, dtype=np.float64),
                          None if x_q is None else np.asarray(x_q, dtype=np.float64), act)
    h = rect_sigmoid(V)
    dh = rect_sigmoid_grad(V)
    W_soft = soft_quantize(layer.weight, g, V, h)
    loss, dW = rec.loss_grad(W_soft)
    grad = _soft_grad(layer.weight, g, h, dW, dh)
    if lam:
        loss += lam * f_reg(V, beta, h)
        grad = grad + lam * f_reg_grad_h(h, beta) * dh
    return loss, grad


# -- optimisation ------------------------------------------------------------

def _make_reconstruction(layer, x_fp, x_q, cfg: AdaRoundConfig) -> _Reconstruction:
    act = layer.activation if cfg.use_activation_in_loss else IDENTITY
    return _Reconstruction(layer, np.asarray(x_fp, dtype=np.float64),
                           np.asarray(x_q, dtype=np.float64) if cfg.use_asymmetric and x_q is not None else None,
                           act)


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def optimize_layer(layer: LayerSpec, g: QuantGrid, x_fp, x_q=None, config: Optional[AdaRoundConfig] = None,
                   seed=0) -> tuple[np.ndarray, dict]:
    """Learn a rounding mask for one layer.

    Returns ``(mask, diagnostics)``; the mask is True where the weight rounds
    up. Diagnostics hold the per-iteration loss trace, the fraction of
    decided ``h`` values and the effective regularisation weight.
    """
    cfg = config or AdaRoundConfig()
    if len(x_fp) == 0:
        raise ValueError("calibration set is empty")
    rng = _rng(seed)
    rec = _make_reconstruction(layer, x_fp, x_q, cfg)
    sched = cfg.schedule()
    W = layer.weight
    free = free_mask(W, g)
    temperature = cfg.temperature_start
    if cfg.h_function == RECT_SIGMOID:
        V = init_V(W, g)
    else:
        V = init_V(W, g, zeta=1.0, gamma=0.0)
        if cfg.h_function == SIGMOID_TEMPERATURE:
            V = V * temperature
    params = {"V": V}
    opt = Adam(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    batch = min(cfg.batch_size, rec.n)
    use_reg = cfg.h_function != SIGMOID_TEMPERATURE and cfg.lam > 0
    lam_eff = 0.0
    trace = np.empty(cfg.iterations)
    n_warm = sched.warmup_iterations

    for it in range(cfg.iterations):
        if cfg.h_function == SIGMOID_TEMPERATURE:
            frac = it / max(cfg.iterations - 1, 1)
            temperature = cfg.temperature_start * (cfg.temperature_end / cfg.temperature_start) ** frac
        if use_reg and it == n_warm:
            lam_eff = _scaled_lambda(rec, W, g, params["V"], cfg, sched.beta(it), free, batch)
        idx = rng.choice(rec.n, batch, replace=False)
        h, dh = _h_and_grad(params["V"], cfg, temperature)
        h = h * free
        if cfg.debug:
            assert np.all((h >= 0) & (h <= 1)), f"h(V) left [0, 1] at iteration {it}"
        W_soft = soft_quantize(W, g, None, h)
        loss, dW = rec.loss_grad(W_soft, idx)
        grad = _soft_grad(W, g, h, dW, dh) * free
        if use_reg and sched.regularize(it):
            beta = sched.beta(it)
            loss += lam_eff * float(np.sum((1.0 - np.abs(2.0 * h - 1.0) ** beta)[free]))
            grad = grad + lam_eff * f_reg_grad_h(h, beta) * dh * free
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at iteration {it}")
        trace[it] = loss
        opt.step(params, {"V": grad})

    h, _ = _h_and_grad(params["V"], cfg, temperature)
    h = h * free
    mask = (h >= 0.5) & free
    hf = h[free]
    decided = float(np.mean(np.minimum(hf, 1.0 - hf) <= 1e-3)) if hf.size else 1.0
    undecided = np.flatnonzero(free.ravel() & (h.ravel() > 0.01) & (h.ravel() < 0.99))
    if undecided.size:
        shown = ", ".join(map(str, undecided[:20])) + (", ..." if undecided.size > 20 else "")
        log.warning("%s: %d soft rounding values undecided at finish (flat indices %s)",
                    layer.name or "layer", undecided.size, shown)
    diagnostics = {
        "loss_trace": trace,
        "decided_fraction": decided,
        "undecided_indices": undecided,
        "lambda_effective": lam_eff,
        "n_free": int(free.sum()),
        "flipped_vs_nearest": int(np.sum(mask != ((round_half_away(W / g.scale) > np.floor(W / g.scale)) & free))),
        "h": h,
    }
    return mask, diagnostics


def _scaled_lambda(rec: _Reconstruction, W, g, V, cfg: AdaRoundConfig, beta: float, free, batch: int) -> float:
    # puts lam * f_reg on the scale of a reference reconstruction error at the end of warmup.
    # The warmup soft weights can reproduce W exactly when nothing clips, making that error ~0,
    # so the default reference is the nearest-rounding error, which is what f_reg has to beat.
    h, _ = _h_and_grad(V, cfg, 1.0)
    h = h * free
    W_ref = quantize_nearest(W, g) if cfg.lambda_reference == "nearest" else soft_quantize(W, g, None, h)
    err, _ = rec.loss_grad(W_ref)
    err *= batch / rec.n
    reg = float(np.sum((1.0 - np.abs(2.0 * h - 1.0) ** beta)[free]))
    if reg <= 0 or err <= 0:
        return cfg.lam
    return cfg.lam * err / reg


def optimize_layer_ste(layer: LayerSpec, g: QuantGrid, x_fp, x_q=None, config: Optional[AdaRoundConfig] = None,
                       seed=0) -> tuple[np.ndarray, dict]:
    """Straight-through baseline: optimise the weights through a pass-through rounding.

    Same reconstruction objective without the regulariser. Weights live in
    grid units and may move more than one step, so the result is returned as
    quantized weights rather than an up/down mask. The pass-through gradient
    never vanishes, so the iterate keeps drifting; every ``checkpoint_every``
    steps the snapped weights are scored on the full calibration set and the
    best seen (starting from nearest rounding) is returned.
    """
    cfg = config or AdaRoundConfig()
    if len(x_fp) == 0:
        raise ValueError("calibration set is empty")
    rng = _rng(seed)
    rec = _make_reconstruction(layer, x_fp, x_q, cfg)
    params = {"u": np.asarray(layer.weight, dtype=np.float64) / g.scale}
    opt = Adam(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    batch = min(cfg.batch_size, rec.n)
    trace = np.empty(cfg.iterations)
    best = quantize_nearest(layer.weight, g)
    best_loss = rec.loss_grad(best)[0]
    for it in range(cfg.iterations):
        u = params["u"]
        W_hat = g.scale * (np.clip(round_half_away(u), g.n, g.p) + 0.0)
        if it > 0 and it % cfg.checkpoint_every == 0:
            full = rec.loss_grad(W_hat)[0]
            if full < best_loss:
                best, best_loss = W_hat, full
        idx = rng.choice(rec.n, batch, replace=False)
        loss, dW = rec.loss_grad(W_hat, idx)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at iteration {it}")
        trace[it] = loss
        opt.step(params, {"u": dW * g.scale * ((u >= g.n) & (u <= g.p))})
    W_hat = quantize_nearest(g.scale * params["u"], g)
    full = rec.loss_grad(W_hat)[0]
    if full < best_loss:
        best, best_loss = W_hat, full
    return best, {"loss_trace": trace, "best_loss": best_loss / rec.n}
