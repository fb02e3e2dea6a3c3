"""Empirical bias correction: shift the quantized layer's bias by the mean output error."""

import numpy as np

from .tensor import DimensionError, LayerSpec, layer_preactivation


def _channel_mean(z: np.ndarray) -> np.ndarray:
    return z.reshape(-1, z.shape[-1]).mean(axis=0)


def bias_correct(layer: LayerSpec, quantized: LayerSpec, x, x_q=None) -> np.ndarray:
    """Per-output-channel ``E[W x] - E[W_hat x]`` over the batch (and spatial positions).

    ``x_q`` is the input seen by the quantized layer when it differs from the
    float path; it defaults to ``x``.
    """
    if layer.weight.shape != quantized.weight.shape:
        raise DimensionError(f"weight shapes differ: {layer.weight.shape} vs {quantized.weight.shape}")
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("calibration batch is empty")
    xq = x if x_q is None else np.asarray(x_q, dtype=np.float64)
    ref = _channel_mean(layer_preactivation(layer, x))
    out = _channel_mean(layer_preactivation(quantized, xq))
    return ref - out


def apply_bias_delta(layer: LayerSpec, delta: np.ndarray) -> LayerSpec:
    bias = np.zeros(layer.out_channels) if layer.bias is None else layer.bias
    return layer.with_weight(layer.weight, bias + delta)
