"""Rounding as a quadratic unconstrained binary optimization problem.

For a weight vector ``w`` on a grid, a mask ``b`` picks ``floor + d*b`` per
element, so the perturbation ``delta = d*b - e`` (``e = w - floor``,
``d = ceil - floor``) is affine in ``b``. Any quadratic cost in ``delta``
is therefore a QUBO over the elements that have a real choice (``d != 0``).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .model import ModelGraph, loss_and_grads
from .quantizer import (
    QuantGrid,
    fractional_part,
    quantize_ceil,
    quantize_floor,
)
from .tensor import CONV2D, LayerSpec, im2col, layer_input_rows

log = logging.getLogger(__name__)

MAX_EXHAUSTIVE_DIM = 24
TASKLOSS_FD_STEP = 1e-3  # central-difference step, in units of the grid scale


@dataclass
class QuboProblem:
    """``cost(b) = b^T Q b + q^T b + c0``.

    ``variables`` maps each binary variable to its flat index in the weight
    tensor the problem was built from; other elements are fixed to 0.
    """

    Q: np.ndarray
    q: np.ndarray
    c0: float = 0.0
    variables: Optional[np.ndarray] = None

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=np.float64)
        self.q = np.asarray(self.q, dtype=np.float64)
        if self.Q.shape != (self.dim, self.dim):
            raise ValueError(f"Q shape {self.Q.shape} does not match linear term length {self.dim}")
        if not np.allclose(self.Q, self.Q.T, rtol=0, atol=1e-12 * max(1.0, np.abs(self.Q).max(initial=0))):
            raise ValueError("Q must be symmetric")

    @property
    def dim(self) -> int:
        return self.q.shape[0]

    def cost(self, b) -> float:
        b = np.asarray(b, dtype=np.float64)
        return float(b @ self.Q @ b + self.q @ b + self.c0)

    def costs(self, B) -> np.ndarray:
        """Vectorised cost of each row of ``B``."""
        B = np.asarray(B, dtype=np.float64)
        return np.einsum("ij,ij->i", B @ self.Q, B) + B @ self.q + self.c0


def rounding_qubo(w, grid: QuantGrid, M, grad=None) -> QuboProblem:
    """QUBO for ``delta^T M delta (+ grad^T delta)`` with ``delta = w_hat - w``.

    ``w`` is flat; ``M`` is ``(len(w), len(w))``.
    """
    w = np.asarray(w, dtype=np.float64).ravel()
    M = np.asarray(M, dtype=np.float64)
    M = 0.5 * (M + M.T)
    lo = quantize_floor(w, grid)
    d = quantize_ceil(w, grid) - lo
    e = w - lo
    free = np.flatnonzero(d != 0)
    df = d[free]
    Me = M @ e
    Q = df[:, None] * M[np.ix_(free, free)] * df[None, :]
    q = -2.0 * df * Me[free]
    c0 = float(e @ Me)
    if grad is not None:
        grad = np.asarray(grad, dtype=np.float64).ravel()
        q = q + df * grad[free]
        c0 -= float(grad @ e)
    Q = 0.5 * (Q + Q.T)
    return QuboProblem(Q, q, c0, free)


def expand_bits(problem: QuboProblem, bits, size: int) -> np.ndarray:
    """Full-length mask with the solved bits placed at their weight positions."""
    out = np.zeros(size, dtype=bool)
    out[problem.variables] = np.asarray(bits, dtype=bool)
    return out


def estimate_second_moment(x_batch) -> np.ndarray:
    """Empirical ``E[x x^T]`` over the leading axis of ``x_batch``."""
    X = np.asarray(x_batch, dtype=np.float64)
    if X.ndim == 1:
        X = X[None]
    X = X.reshape(X.shape[0], -1)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    return X.T @ X / X.shape[0]


def _check_psd(xx: np.ndarray):
    if xx.size == 0:
        return
    lam = np.linalg.eigvalsh(0.5 * (xx + xx.T)).min()
    if lam < -1e-9 * max(1.0, np.abs(xx).max()):
        warnings.warn(f"second-moment matrix is not PSD (min eigenvalue {lam:.3e}); proceeding", RuntimeWarning)


def build_local_qubo_row(w_row, grid: QuantGrid, xx) -> QuboProblem:
    """Local-MSE problem for one output row: cost(b) = E[(delta . x)^2] = delta^T xx delta."""
    xx = np.asarray(xx, dtype=np.float64)
    w_row = np.asarray(w_row, dtype=np.float64).ravel()
    if xx.shape != (w_row.size, w_row.size):
        raise ValueError(f"second moment shape {xx.shape} does not match row length {w_row.size}")
    _check_psd(xx)
    return rounding_qubo(w_row, grid, xx)


def conv_second_moment(layer: LayerSpec, x_batch) -> np.ndarray:
    """``E_x[sum_positions p p^T]`` over im2col patches ``p`` of each sample."""
    x = np.asarray(x_batch, dtype=np.float64)
    kh, kw = layer.kernel
    cols = im2col(x, kh, kw, layer.stride, layer.padding)
    cols = cols.reshape(-1, cols.shape[-1])
    return cols.T @ cols / x.shape[0]


def build_conv_qubo_channel(w_channel, grid: QuantGrid, xx_patches) -> QuboProblem:
    """Problem for one output channel ``W[:, :, :, c]`` given :func:`conv_second_moment`.

    Its cost is ``E ||delta_c * x||_F^2`` summed over output positions.
    """
    return build_local_qubo_row(np.asarray(w_channel).ravel(), grid, xx_patches)


def layer_local_qubos(layer: LayerSpec, grid: QuantGrid, x_batch) -> list[QuboProblem]:
    """One independent problem per dense row or conv output channel."""
    if layer.kind == CONV2D:
        xx = conv_second_moment(layer, x_batch)
        return [build_conv_qubo_channel(layer.weight[..., c], grid, xx) for c in range(layer.out_channels)]
    xx = estimate_second_moment(x_batch)
    return [build_local_qubo_row(row, grid, xx) for row in layer.weight]


def layer_asymmetric_qubos(layer: LayerSpec, grid: QuantGrid, x_fp, x_q) -> list[QuboProblem]:
    """Per-row problems for ``E||W x_fp - W_hat x_q||^2`` (preactivations, bias cancels).

    Writing ``W_hat x_q - W x_fp = delta x_q + W (x_q - x_fp)`` gives the same
    quadratic term as the local problem on ``x_q`` plus a linear term and a
    constant from the input mismatch.
    """
    x_fp = np.asarray(x_fp, dtype=np.float64)
    n = x_fp.shape[0]
    Rq = layer_input_rows(layer, x_q)
    D = Rq - layer_input_rows(layer, x_fp)
    M = Rq.T @ Rq / n
    _check_psd(M)
    problems = []
    for w in channel_rows(layer, layer.weight):
        r = D @ w
        p = rounding_qubo(w, grid, M, 2.0 * (Rq.T @ r) / n)
        p.c0 += float(r @ r) / n
        problems.append(p)
    return problems


def channel_rows(layer: LayerSpec, W: np.ndarray) -> np.ndarray:
    """Weights arranged with one problem per row: ``(out, fan_in)``."""
    if layer.kind == CONV2D:
        return np.moveaxis(W, 3, 0).reshape(W.shape[3], -1)
    return W


def rows_to_weight(layer: LayerSpec, rows: np.ndarray) -> np.ndarray:
    if layer.kind == CONV2D:
        kh, kw, cin, cout = layer.weight.shape
        return np.moveaxis(rows.reshape(cout, kh, kw, cin), 0, 3)
    return rows


# -- task-loss Hessian ----------------------------------------------------

def finite_difference_hessian(grad_fn: Callable[[np.ndarray], np.ndarray], w, step: float,
                              indices=None) -> np.ndarray:
    """Columns ``H[:, i] = (grad(w + h e_i) - grad(w - h e_i)) / 2h``, symmetrised.

    Only the columns in ``indices`` (default all) are probed; the returned
    matrix is restricted to those rows and columns.
    """
    w = np.asarray(w, dtype=np.float64).ravel()
    idx = np.arange(w.size) if indices is None else np.asarray(indices)
    H = np.empty((idx.size, idx.size))
    for col, i in enumerate(idx):
        wp = w.copy()
        wp[i] += step
        gp = np.asarray(grad_fn(wp), dtype=np.float64).ravel()
        wm = w.copy()
        wm[i] -= step
        gm = np.asarray(grad_fn(wm), dtype=np.float64).ravel()
        if not (np.all(np.isfinite(gp)) and np.all(np.isfinite(gm))):
            raise FloatingPointError(f"non-finite loss gradient while probing weight index {i} (probe {col})")
        H[:, col] = (gp[idx] - gm[idx]) / (2.0 * step)
    return 0.5 * (H + H.T)


def taskloss_gradient_fn(model: ModelGraph, layer_index: int, x, labels):
    """Closure: flat weights of one layer -> mean cross-entropy gradient w.r.t. them."""
    layer = model.layers[layer_index]
    shape = layer.weight.shape

    def grad_fn(w_flat):
        probe = model.replace_layer(layer_index, layer.with_weight(np.reshape(w_flat, shape)))
        loss, grads = loss_and_grads(probe, x, labels, layers=[layer_index])
        if not np.isfinite(loss):
            raise FloatingPointError("non-finite task loss")
        return grads[layer_index][0].ravel()

    return grad_fn


def build_taskloss_qubo(model: ModelGraph, layer_index: int, grid: QuantGrid, x, labels,
                        include_gradient: bool = False, step: Optional[float] = None) -> QuboProblem:
    """Second-order Taylor model of the task-loss change for one layer's rounding.

    cost(b) = 1/2 delta^T H delta (+ g^T delta), ``H`` from central finite
    differences of the batch-mean cross-entropy gradient. Probing costs two
    backward passes per weight of the layer.
    """
    layer = model.layers[layer_index]
    w = layer.weight.ravel()
    h = TASKLOSS_FD_STEP * grid.scale if step is None else step
    grad_fn = taskloss_gradient_fn(model, layer_index, x, labels)
    H = finite_difference_hessian(grad_fn, w, h)
    g = grad_fn(w) if include_gradient else None
    return rounding_qubo(w, grid, 0.5 * H, g)


# -- solvers --------------------------------------------------------------

def solve_exhaustive(problem: QuboProblem, chunk: int = 1 << 16) -> tuple[np.ndarray, float]:
    """Global optimum by enumeration.

    Ties (within rounding noise) go to the mask with fewer ones, then the
    lexicographically smallest bit tuple.
    """
    dim = problem.dim
    if dim > MAX_EXHAUSTIVE_DIM:
        raise ValueError(f"exhaustive solve limited to {MAX_EXHAUSTIVE_DIM} variables, problem has {dim}")
    if dim == 0:
        return np.zeros(0, dtype=bool), float(problem.c0)
    shifts = np.arange(dim)
    total = 1 << dim
    costs = np.empty(total)
    for start in range(0, total, chunk):
        k = np.arange(start, min(start + chunk, total))
        B = ((k[:, None] >> shifts) & 1).astype(np.float64)
        costs[start:start + len(k)] = problem.costs(B)
    best = costs.min()
    tol = 1e-12 * max(1.0, abs(best), float(np.abs(costs).max()))
    ties = np.flatnonzero(costs <= best + tol)
    cands = ((ties[:, None] >> shifts) & 1).astype(bool)
    pick = min(range(len(ties)), key=lambda j: (int(cands[j].sum()), tuple(cands[j].astype(int))))
    return cands[pick], float(costs[ties[pick]])


@dataclass
class CEParams:
    population: int = 128
    elite_fraction: float = 0.1
    smoothing: float = 0.7
    iterations: int = 200
    # probability floor/ceiling; None -> min(0.2, 4/dim), about four exploratory flips per sample
    clamp: Optional[tuple[float, float]] = None
    # refine each elite sample by single-bit steepest descent before the update
    polish: bool = True

    def bounds(self, dim: int) -> tuple[float, float]:
        if self.clamp is not None:
            return self.clamp
        eps = min(0.2, 4.0 / max(dim, 1))
        return eps, 1.0 - eps


def solve_cross_entropy(problem: QuboProblem, init_probs=None, params: Optional[CEParams] = None,
                        seed=0, trace: Optional[list] = None) -> tuple[np.ndarray, float]:
    """Cross-entropy method over independent Bernoulli bits.

    Each iteration samples ``population`` masks, keeps the elite fraction and
    moves the probabilities toward the elite mean. The best mask ever sampled
    is returned. ``trace`` (if given) receives the best-ever cost per iteration.
    """
    params = params or CEParams()
    rng = np.random.default_rng(seed)
    dim = problem.dim
    if dim == 0:
        return np.zeros(0, dtype=bool), float(problem.c0)
    probs = np.full(dim, 0.5) if init_probs is None else np.asarray(init_probs, dtype=np.float64).copy()
    if probs.shape != (dim,):
        raise ValueError(f"init_probs length {probs.shape} != problem dim {dim}")
    lo, hi = params.bounds(dim)
    n_elite = max(1, int(round(params.elite_fraction * params.population)))
    best_bits, best_cost = None, np.inf
    for _ in range(params.iterations):
        B = rng.random((params.population, dim)) < probs
        c = problem.costs(B)
        order = np.argsort(c, kind="stable")
        elite = B[order[:n_elite]]
        ec = c[order[:n_elite]]
        if params.polish:
            elite = np.stack([one_flip_descent(problem, b) for b in elite])
            ec = problem.costs(elite)
        k = int(np.argmin(ec))
        if ec[k] < best_cost:
            best_cost = float(ec[k])
            best_bits = elite[k].copy()
        probs = params.smoothing * elite.mean(axis=0) + (1.0 - params.smoothing) * probs
        probs = np.clip(probs, lo, hi)
        if trace is not None:
            trace.append(best_cost)
    return best_bits, best_cost


def one_flip_descent(problem: QuboProblem, bits) -> np.ndarray:
    """Flip the single most improving bit until no flip lowers the cost."""
    x = np.asarray(bits, dtype=np.float64).copy()
    Qx = problem.Q @ x
    diag = np.diag(problem.Q)
    tol = 1e-12 * max(1.0, abs(problem.cost(x)))
    for _ in range(4 * problem.dim + 1):
        d = 1.0 - 2.0 * x
        gain = 2.0 * d * Qx + diag + d * problem.q
        i = int(np.argmin(gain))
        if gain[i] >= -tol:
            break
        x[i] += d[i]
        Qx += d[i] * problem.Q[:, i]
    return x.astype(bool)


def default_init_probs(w, grid: QuantGrid, problem: QuboProblem) -> np.ndarray:
    """Stochastic-rounding distribution (fractional part of w/s) over the free variables."""
    frac = fractional_part(np.asarray(w).ravel(), grid)
    return frac[problem.variables]
