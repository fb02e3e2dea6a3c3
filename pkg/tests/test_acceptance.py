"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line."""

import time

import numpy as np
import pytest

from roundopt import adaround as ar
from roundopt import eval as ev
from roundopt import model_io, qubo
from roundopt.config import RunConfig
from roundopt.pipeline import local_error, quantize_model
from roundopt.quantizer import QuantGrid, apply_mask, fit_grid, min_max_scale, quantize_nearest
from roundopt.tensor import CONV2D, DENSE, IDENTITY, RELU, LayerSpec

from conftest import naive_conv2d

pytestmark = pytest.mark.slow


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
        return ok
    return emit


def _ce_instance(seed):
    r = np.random.default_rng(seed)
    k = int(r.integers(8, 21))
    n = int(r.integers(16, 64))
    w = r.normal(size=k)
    x = r.normal(size=(n, k))
    if r.random() < 0.5:  # post-ReLU style inputs
        x = np.maximum(x, 0) + 0.1 * r.normal(size=(n, k))
    g = QuantGrid.symmetric(4, min_max_scale(w, 4))
    return w, g, qubo.build_local_qubo_row(w, g, qubo.estimate_second_moment(x))


def test_1_cross_entropy_matches_exhaustive(report):
    t0 = time.perf_counter()
    hits, dims = 0, []
    for seed in range(100):
        w, g, P = _ce_instance(seed)
        dims.append(P.dim)
        _, c_ex = qubo.solve_exhaustive(P)
        _, c_ce = qubo.solve_cross_entropy(P, qubo.default_init_probs(w, g, P), seed=seed)
        hits += abs(c_ce - c_ex) <= 1e-9 * max(1.0, abs(c_ex))
    dt = time.perf_counter() - t0
    ok = hits >= 95 and dt < 60 and max(dims) <= 20
    report(1, ok, f"{hits}/100 optimal, max dim {max(dims)}, {dt:.1f} s")
    assert ok


def test_2_objective_equality_chain(report):
    worst = 0.0
    for seed in range(20):
        r = np.random.default_rng(seed)
        k = int(r.integers(2, 13))
        W = r.normal(size=(3, k))
        x = r.normal(size=(int(r.integers(5, 40)), k))
        g = QuantGrid.symmetric(4, float(np.abs(W).max()) / 7.5)
        xx = qubo.estimate_second_moment(x)
        for row in range(3):
            P = qubo.build_local_qubo_row(W[row], g, xx)
            for code in range(2 ** P.dim):
                bits = np.array([(code >> i) & 1 for i in range(P.dim)], dtype=bool)
                mask = np.zeros(k, bool)
                mask[P.variables] = bits
                d = apply_mask(W[row], g, mask) - W[row]
                direct = float(np.mean((x @ d) ** 2))
                worst = max(worst, abs(P.cost(bits) - direct) / max(1.0, direct))
    ok = worst <= 1e-9
    report(2, ok, f"max |QUBO - forward MSE| {worst:.2e} over all masks, dim <= 12")
    assert ok


def test_3_conv_channel_decomposition(report):
    worst = 0.0
    for seed in range(10):
        r = np.random.default_rng(seed)
        cin, cout = int(r.integers(1, 4)), int(r.integers(1, 5))
        stride, padding = int(r.integers(1, 3)), int(r.integers(0, 2))
        layer = LayerSpec(CONV2D, r.normal(size=(3, 3, cin, cout)), None, IDENTITY, stride, padding)
        x = r.normal(size=(6, 6, 6, cin))
        g = QuantGrid.symmetric(4, float(np.abs(layer.weight).max()) / 7.5)
        probs = qubo.layer_local_qubos(layer, g, x)
        mask = r.random(layer.weight.shape) < 0.5
        dW = apply_mask(layer.weight, g, mask) - layer.weight
        total = sum(p.cost(mask[..., c].ravel()[p.variables]) for c, p in enumerate(probs))
        direct = float(np.mean([np.sum(naive_conv2d(xi, dW, None, stride, padding) ** 2) for xi in x]))
        worst = max(worst, abs(total - direct) / max(1.0, direct))
    ok = worst <= 1e-9
    report(3, ok, f"max |sum of channel costs - conv MSE| {worst:.2e}")
    assert ok


def _gradient_instance(r):
    kind = DENSE if r.random() < 0.5 else CONV2D
    s = float(r.uniform(0.1, 0.5))
    shape = (3, 6) if kind == DENSE else (3, 3, 2, 3)
    W = r.uniform(-4, 4, shape) * s  # well inside the grid, no saturation
    layer = LayerSpec(kind, W, r.normal(size=3) * 0.1, RELU if r.random() < 0.5 else IDENTITY, padding=1)
    V = r.uniform(-2.0, 2.0, shape)
    x_fp = r.normal(size=(6, 6)) if kind == DENSE else r.normal(size=(3, 4, 4, 2))
    return layer, QuantGrid.symmetric(4, s), V, x_fp, x_fp + 0.05 * r.normal(size=x_fp.shape)


def test_4_gradient_matches_finite_differences(report):
    worst = 0.0
    for seed in range(50):
        r = np.random.default_rng(1000 + seed)
        layer, g, V, x_fp, x_q = _gradient_instance(r)
        lam, beta = float(r.uniform(0, 1)), float(r.uniform(2, 20))
        _, grad = ar.layer_loss(layer, g, V, x_fp, x_q, lam, beta)
        fd = np.empty(V.size)
        for i in range(V.size):
            e = np.zeros(V.size)
            e[i] = 1e-5
            e = e.reshape(V.shape)
            fd[i] = (ar.layer_loss(layer, g, V + e, x_fp, x_q, lam, beta)[0]
                     - ar.layer_loss(layer, g, V - e, x_fp, x_q, lam, beta)[0]) / 2e-5
        worst = max(worst, np.abs(grad.ravel() - fd).max() / np.abs(fd).max())
    ok = worst <= 1e-4
    report(4, ok, f"max relative error {worst:.2e} over 50 instances")
    assert ok


def test_5_relaxation_quality(bundled, report):
    model, xc, *_ = bundled
    cfg = RunConfig().adaround()
    grids = [fit_grid(l.weight, 4, "weight_mse") for l in model.layers]
    # layer i sees the float input and the input produced by the nearest-rounded prefix
    q_model = model
    for i, (l, g) in enumerate(zip(model.layers, grids)):
        q_model = q_model.replace_layer(i, l.with_weight(quantize_nearest(l.weight, g)))
    lines, ok = [], True
    for i, (layer, g) in enumerate(zip(model.layers, grids)):
        x_fp, x_q = model.forward(xc, 0, i), q_model.forward(xc, 0, i)
        e_near = local_error(layer, q_model.layers[i], x_fp, x_q)
        wins, decided = 0, []
        for seed in range(20):
            mask, d = ar.optimize_layer(layer, g, x_fp, x_q, cfg, np.random.default_rng(seed))
            e = local_error(layer, layer.with_weight(apply_mask(layer.weight, g, mask)), x_fp, x_q)
            wins += e <= e_near
            decided.append(d["decided_fraction"])
        ok &= wins >= 19 and min(decided) >= 0.99
        lines.append(f"{layer.name}: {wins}/20 <= nearest, min decided {min(decided):.4f}")
    report(5, ok, "; ".join(lines))
    assert ok


def _mean_accuracy(model, xc, xt, yt, method, seeds, grid="weight_mse"):
    return float(np.mean([ev.accuracy(quantize_model(model, xc, RunConfig(method=method, seed=s, grid_policy=grid)).model,
                                      xt, yt) for s in seeds]))


def test_6_end_to_end_ordering(bundled, report):
    model, xc, _, xt, yt = bundled
    t0 = time.perf_counter()
    seeds = range(5)
    acc = {m: _mean_accuracy(model, xc, xt, yt, m, seeds) for m in ("nearest", "bias-corrected", "ste", "adaround")}
    dt = time.perf_counter() - t0
    ok = (acc["adaround"] >= acc["ste"] >= acc["bias-corrected"] >= acc["nearest"]
          and acc["adaround"] - acc["nearest"] >= 0.01 and dt < 900)
    report(6, ok, ", ".join(f"{m} {a:.4f}" for m, a in acc.items()) + f"; {dt:.0f} s")
    assert ok


def test_7_cost_accuracy_correlation(bundled, report):
    model, xc, yc, xt, yt = bundled
    g = fit_grid(model.layers[0].weight, 4, "weight_mse")
    res = ev.cost_accuracy_correlation(model, 0, g, xc, yc, xt, yt, n_samples=100, seed=0)
    ok = res.spearman is not None and res.spearman < -0.5
    report(7, ok, f"spearman {res.spearman:.3f} over 100 stochastic masks of {model.layers[0].name}")
    assert ok


def test_8_grid_policy_ordering(bundled, report):
    model, xc, _, xt, yt = bundled
    acc = {}
    for grid in ("min_max", "weight_mse", "preact_mse"):
        for method in ("nearest", "adaround"):
            acc[grid, method] = _mean_accuracy(model, xc, xt, yt, method, [0], grid)
    ok = (acc["weight_mse", "nearest"] >= acc["min_max", "nearest"]
          and acc["preact_mse", "nearest"] >= acc["min_max", "nearest"]
          and all(acc[g, "adaround"] > acc[g, "nearest"] for g in ("min_max", "weight_mse", "preact_mse")))
    report(8, ok, ", ".join(f"{g}/{m} {a:.4f}" for (g, m), a in acc.items()))
    assert ok


def test_9_determinism_and_round_trips(bundled, tmp_path, report):
    model, xc, yc, *_ = bundled
    cfg = RunConfig(method="adaround", iterations=500, calib_samples=256)
    runs = []
    for k in range(2):
        res = quantize_model(model, xc, cfg)
        for rec in res.layers:
            rec.wall_time_ms = 0.0
        out = tmp_path / f"run{k}"
        model_io.save_model(res.model, out / "model.json")
        model_io.save_masks(out / "masks", {r.name: r.mask for r in res.layers})
        model_io.write_report(out / "report.csv", model_io.report_rows(res), res.config)
        runs.append((res, out))
    (a, da), (b, db) = runs
    masks_same = all(np.array_equal(ra.mask, rb.mask) for ra, rb in zip(a.layers, b.layers))
    csv_same = (da / "report.csv").read_bytes() == (db / "report.csv").read_bytes()
    files_same = all((da / p.relative_to(db)).read_bytes() == p.read_bytes()
                     for p in db.rglob("*") if p.is_file())
    back = model_io.load_model(da / "model.json")
    model_exact = all(x.weight.tobytes() == y.weight.tobytes() and x.bias.tobytes() == y.bias.tobytes()
                      for x, y in zip(back.layers, a.model.layers))
    masks_exact = all(np.array_equal(model_io.load_mask(da / "masks" / f"{r.name}.mask"), r.mask) for r in a.layers)
    model_io.save_calib(tmp_path / "c.bin", xc, yc)
    x2, y2 = model_io.load_calib(tmp_path / "c.bin")
    calib_exact = x2.tobytes() == xc.tobytes() and np.array_equal(y2, yc)
    cfg2, rows2 = model_io.read_report(da / "report.csv")
    report_exact = cfg2 == a.config and [r["local_mse"] for r in rows2] == \
        [r["local_mse"] for r in model_io.report_rows(a)]
    checks = dict(masks=masks_same, csv=csv_same, files=files_same, model_io=model_exact, mask_io=masks_exact,
                  calib_io=calib_exact, report_io=report_exact)
    ok = all(checks.values())
    report(9, ok, ", ".join(f"{k} {'ok' if v else 'MISMATCH'}" for k, v in checks.items()))
    assert ok
