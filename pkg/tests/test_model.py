import numpy as np
import pytest

from roundopt.data import N_CLASSES, SIZE, class_templates, generate, to_float32
from roundopt.model import ModelGraph, build_tiny_cnn, cross_entropy, log_softmax, loss_and_grads, train
from roundopt.optim import Adam
from roundopt.tensor import CONV2D, DENSE, RELU, LayerSpec


def small_net(rng):
    conv = LayerSpec(CONV2D, rng.normal(size=(3, 3, 1, 2)) * 0.5, rng.normal(size=2) * 0.1, RELU, stride=2,
                     padding=1, name="c")
    fc = LayerSpec(DENSE, rng.normal(size=(3, 2 * 3 * 3)) * 0.5, rng.normal(size=3) * 0.1, name="f")
    return ModelGraph([conv, fc], (5, 5, 1))


def test_log_softmax_normalised(rng):
    z = rng.normal(size=(4, 6)) * 50
    np.testing.assert_allclose(np.exp(log_softmax(z)).sum(axis=1), 1.0, atol=1e-12)


def test_cross_entropy_uniform():
    assert cross_entropy(np.zeros((3, 4)), np.array([0, 1, 2])) == pytest.approx(np.log(4))


def test_backprop_matches_finite_differences(rng):
    m = small_net(rng)
    x = rng.normal(size=(7, 5, 5, 1))
    y = rng.integers(0, 3, 7)
    _, grads = loss_and_grads(m, x, y)
    for i, layer in enumerate(m.layers):
        for tensor, analytic in ((layer.weight, grads[i][0]), (layer.bias, grads[i][1])):
            fd = np.zeros_like(tensor)
            for idx in np.ndindex(tensor.shape):
                old = tensor[idx]
                tensor[idx] = old + 1e-6
                lp = cross_entropy(m.forward(x), y)
                tensor[idx] = old - 1e-6
                lm = cross_entropy(m.forward(x), y)
                tensor[idx] = old
                fd[idx] = (lp - lm) / 2e-6
            np.testing.assert_allclose(analytic, fd, rtol=1e-5, atol=1e-8)


def test_layer_subset_gradients(rng):
    m = small_net(rng)
    x = rng.normal(size=(4, 5, 5, 1))
    y = rng.integers(0, 3, 4)
    _, full = loss_and_grads(m, x, y)
    _, part = loss_and_grads(m, x, y, layers=[1])
    assert set(part) == {1}
    np.testing.assert_allclose(part[1][0], full[1][0])


def test_layer_inputs_and_forward(rng):
    m = small_net(rng)
    x = rng.normal(size=(3, 5, 5, 1))
    ins = m.layer_inputs(x)
    assert len(ins) == 3
    np.testing.assert_array_equal(ins[-1], m.forward(x))
    np.testing.assert_array_equal(m.forward(ins[1], start=1), m.forward(x))


def test_tiny_cnn_size():
    m = build_tiny_cnn(np.random.default_rng(0))
    assert [l.kind for l in m.layers] == [CONV2D, CONV2D, DENSE]
    assert m.n_weights() <= 20_000
    assert m.forward(np.zeros((2, 8, 8, 1))).shape == (2, 10)


def test_training_reduces_loss():
    x, y = generate(512, 3)
    m = build_tiny_cnn(np.random.default_rng(1))
    before = cross_entropy(m.forward(x), y)
    train(m, x, y, epochs=3, seed=0)
    assert cross_entropy(m.forward(x), y) < before


def test_adam_matches_reference_update():
    p = {"w": np.array([1.0, -2.0])}
    opt = Adam(lr=0.1)
    g = np.array([0.5, -1.0])
    m = v = np.zeros(2)
    ref = p["w"].copy()
    for t in range(1, 4):
        opt.step(p, {"w": g})
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["w"], ref, rtol=1e-14)


def test_adam_minimises_quadratic():
    p = {"w": np.array([3.0, -4.0])}
    opt = Adam(lr=0.05)
    for _ in range(2000):
        opt.step(p, {"w": 2 * p["w"]})
    assert np.abs(p["w"]).max() < 1e-2


def test_data_deterministic():
    a, la = generate(50, 9)
    b, lb = generate(50, 9)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(la, lb)
    assert a.shape == (50, SIZE, SIZE, 1) and la.max() < N_CLASSES
    assert class_templates().shape == (N_CLASSES, SIZE, SIZE)


def test_to_float32_exact(rng):
    m = to_float32(small_net(rng))
    for l in m.layers:
        np.testing.assert_array_equal(l.weight, l.weight.astype(np.float32).astype(np.float64))
