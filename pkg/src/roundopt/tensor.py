"""Dense tensor arithmetic and the two layer kinds the toolkit understands.

Tensors are plain ``float64`` numpy arrays. Layouts:

* dense weights ``(out, in)``, inputs ``(in,)`` or ``(N, in)``
* conv weights ``(kh, kw, c_in, c_out)``, inputs ``(h, w, c_in)`` or ``(N, h, w, c_in)``
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

DENSE = "dense"
CONV2D = "conv2d"
IDENTITY = "identity"
RELU = "relu"


class DimensionError(ValueError):
    pass


@dataclass
class LayerSpec:
    kind: str
    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    activation: str = IDENTITY
    stride: int = 1
    padding: int = 0
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.kind == DENSE:
            if self.weight.ndim != 2:
                raise DimensionError(f"dense weight must be 2-D (out, in), got shape {self.weight.shape}")
        elif self.kind == CONV2D:
            if self.weight.ndim != 4:
                raise DimensionError(
                    f"conv2d weight must be 4-D (kh, kw, c_in, c_out), got shape {self.weight.shape}"
                )
        else:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in (IDENTITY, RELU):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.bias is not None and self.bias.shape != (self.out_channels,):
            raise DimensionError(
                f"bias shape {self.bias.shape} does not match {self.out_channels} output channels"
            )

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0] if self.kind == DENSE else self.weight.shape[3]

    @property
    def kernel(self) -> tuple[int, int]:
        return (self.weight.shape[0], self.weight.shape[1]) if self.kind == CONV2D else (1, 1)

    def with_weight(self, weight, bias=...) -> "LayerSpec":
        """Copy of this layer with new weights (and optionally a new bias)."""
        new_bias = self.bias if bias is ... else bias
        return replace(self, weight=np.array(weight, dtype=np.float64),
                       bias=None if new_bias is None else np.array(new_bias, dtype=np.float64),
                       meta=dict(self.meta))

    def weight_matrix(self) -> np.ndarray:
        """Weights as a 2-D ``(fan_in, out)`` matrix acting on im2col rows."""
        if self.kind == DENSE:
            return self.weight.T
        kh, kw, cin, cout = self.weight.shape
        return self.weight.reshape(kh * kw * cin, cout)


def _batched(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == ndim:
        return x[None], True
    return x, False


def dense_forward(layer: LayerSpec, x) -> np.ndarray:
    """Preactivation ``W x + b``; the activation is not applied.

    Per-sample inputs with more than one axis are flattened, so a dense layer
    can follow a conv layer directly.
    """
    x = np.asarray(x, dtype=np.float64)
    fan_in = layer.weight.shape[1]
    if x.ndim == 1:
        single, xb = True, x[None]
    else:
        single, xb = False, x.reshape(x.shape[0], -1)
    if xb.shape[1] != fan_in:
        raise DimensionError(f"input shape {x.shape} incompatible with dense weight shape {layer.weight.shape}")
    z = xb @ layer.weight.T
    if layer.bias is not None:
        z = z + layer.bias
    return z[0] if single else z


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Patches of a ``(N, h, w, c)`` batch as rows of shape ``(N, oh, ow, kh*kw*c)``.

    Row entries are ordered (kernel row, kernel col, channel), matching a
    C-order flatten of a ``(kh, kw, c_in)`` filter.
    """
    n, h, w, c = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    if oh <= 0 or ow <= 0:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {x.shape[1:3]}")
    cols = np.empty((n, oh, ow, kh, kw, c), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = x[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :]
    return cols.reshape(n, oh, ow, kh * kw * c)


def col2im(cols: np.ndarray, x_shape: tuple, kh: int, kw: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Adjoint of :func:`im2col` (scatter-add patches back onto the input)."""
    n, h, w, c = x_shape
    oh, ow = cols.shape[1], cols.shape[2]
    cols = cols.reshape(n, oh, ow, kh, kw, c)
    out = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += cols[:, :, :, i, j, :]
    if padding:
        out = out[:, padding:-padding, padding:-padding, :]
    return out


def conv2d_forward(layer: LayerSpec, x) -> np.ndarray:
    """Zero-padded cross-correlation preactivation, ``(N, oh, ow, c_out)``."""
    xb, single = _batched(x, 3)
    if xb.ndim != 4:
        raise DimensionError(f"conv2d input must be (h, w, c) or (N, h, w, c), got {np.shape(x)}")
    kh, kw, cin, cout = layer.weight.shape
    if xb.shape[3] != cin:
        raise DimensionError(f"input channels {xb.shape[3]} != weight c_in {cin} (weight shape {layer.weight.shape})")
    cols = im2col(xb, kh, kw, layer.stride, layer.padding)
    z = cols @ layer.weight_matrix()
    if layer.bias is not None:
        z = z + layer.bias
    return z[0] if single else z


def layer_preactivation(layer: LayerSpec, x) -> np.ndarray:
    if layer.kind == DENSE:
        return dense_forward(layer, x)
    return conv2d_forward(layer, x)


def layer_input_rows(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    """Rows the weight matrix multiplies: flattened inputs (dense) or im2col patches (conv).

    Returns ``(R, fan_in)``; a dense layer gives one row per sample, a conv
    layer one row per sample and output position.
    """
    x = np.asarray(x, dtype=np.float64)
    if layer.kind == DENSE:
        return x.reshape(x.shape[0], -1)
    kh, kw = layer.kernel
    cols = im2col(x, kh, kw, layer.stride, layer.padding)
    return cols.reshape(-1, cols.shape[-1])


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def activate(x: np.ndarray, activation: str) -> np.ndarray:
    return relu(x) if activation == RELU else x


def mse(a, b) -> float:
    """Sum of squared differences (squared Frobenius norm of ``a - b``)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.dot(d.ravel(), d.ravel()))
