import numpy as np
import pytest

from roundopt.bias_correction import apply_bias_delta, bias_correct
from roundopt.quantizer import QuantGrid, quantize_nearest
from roundopt.tensor import CONV2D, DENSE, DimensionError, LayerSpec, layer_preactivation


def quantized_pair(rng, kind):
    if kind == DENSE:
        layer = LayerSpec(DENSE, rng.normal(size=(4, 6)), rng.normal(size=4))
        x = rng.normal(size=(50, 6)) + 0.5
    else:
        layer = LayerSpec(CONV2D, rng.normal(size=(3, 3, 2, 4)), rng.normal(size=4), padding=1)
        x = rng.normal(size=(10, 5, 5, 2)) + 0.5
    g = QuantGrid.symmetric(3, float(np.abs(layer.weight).max() / 4))
    return layer, layer.with_weight(quantize_nearest(layer.weight, g)), x


def mean_residual(layer, quantized, x):
    d = layer_preactivation(layer, x) - layer_preactivation(quantized, x)
    return d.reshape(-1, d.shape[-1]).mean(axis=0)


@pytest.mark.parametrize("kind", [DENSE, CONV2D])
def test_identical_layers_zero_delta(rng, kind):
    layer, _, x = quantized_pair(rng, kind)
    assert not bias_correct(layer, layer, x).any()


@pytest.mark.parametrize("kind", [DENSE, CONV2D])
def test_mean_residual_vanishes(rng, kind):
    layer, q, x = quantized_pair(rng, kind)
    delta = bias_correct(layer, q, x)
    assert delta.shape == (layer.out_channels,)
    assert np.abs(mean_residual(layer, q, x)).max() > 1e-3
    np.testing.assert_allclose(mean_residual(layer, apply_bias_delta(q, delta), x), 0.0, atol=1e-10)


@pytest.mark.parametrize("kind", [DENSE, CONV2D])
def test_delta_minimises_batch_mse(rng, kind):
    layer, q, x = quantized_pair(rng, kind)
    delta = bias_correct(layer, q, x)
    ref = layer_preactivation(layer, x)

    def err(d):
        return np.sum((ref - layer_preactivation(apply_bias_delta(q, d), x)) ** 2)
    best = err(delta)
    for _ in range(20):
        assert err(delta + 1e-3 * rng.normal(size=delta.shape)) > best


def test_bias_free_layer_gets_bias(rng):
    layer = LayerSpec(DENSE, rng.normal(size=(2, 3)))
    q = layer.with_weight(layer.weight + 0.1)
    out = apply_bias_delta(q, bias_correct(layer, q, rng.normal(size=(20, 3))))
    assert out.bias is not None and out.bias.shape == (2,)


def test_errors(rng):
    layer, q, x = quantized_pair(rng, DENSE)
    with pytest.raises(DimensionError):
        bias_correct(layer, LayerSpec(DENSE, np.zeros((4, 5))), x)
    with pytest.raises(ValueError):
        bias_correct(layer, q, x[:0])
