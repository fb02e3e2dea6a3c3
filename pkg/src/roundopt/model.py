"""Sequential model: forward pass, cross-entropy loss and backprop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    CONV2D,
    DENSE,
    RELU,
    DimensionError,
    LayerSpec,
    activate,
    col2im,
    im2col,
    layer_preactivation,
)


@dataclass
class ModelGraph:
    layers: list[LayerSpec]
    input_shape: tuple[int, ...]
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.layers)

    def copy(self) -> "ModelGraph":
        return ModelGraph([l.with_weight(l.weight) for l in self.layers], tuple(self.input_shape), dict(self.meta))

    def replace_layer(self, index: int, layer: LayerSpec) -> "ModelGraph":
        layers = list(self.layers)
        layers[index] = layer
        return ModelGraph(layers, tuple(self.input_shape), dict(self.meta))

    def n_weights(self) -> int:
        return sum(l.weight.size for l in self.layers)

    def forward(self, x, start: int = 0, stop: int | None = None) -> np.ndarray:
        """Run layers ``start:stop`` on a batch; returns the last layer's activations."""
        h = np.asarray(x, dtype=np.float64)
        for layer in self.layers[start:stop]:
            h = activate(layer_preactivation(layer, h), layer.activation)
        return h

    def layer_inputs(self, x) -> list[np.ndarray]:
        """Input to every layer (index ``i`` holds the input of layer ``i``), plus the output last."""
        h = np.asarray(x, dtype=np.float64)
        out = [h]
        for layer in self.layers:
            h = activate(layer_preactivation(layer, h), layer.activation)
            out.append(h)
        return out

    def predict(self, x, batch_size: int = 1024) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.concatenate([self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    lp = log_softmax(logits)
    return float(-lp[np.arange(len(labels)), labels].mean())


def loss_and_grads(model: ModelGraph, x, labels, layers: list[int] | None = None):
    """Mean cross-entropy and its gradients w.r.t. each layer's (weight, bias).

    ``layers`` restricts which layers get gradients (backprop stops at the
    earliest one). Returns ``(loss, {index: (dW, db or None)})``.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    wanted = set(range(len(model))) if layers is None else set(layers)
    first = min(wanted) if wanted else len(model)

    inputs, preacts = [], []
    h = x
    for layer in model.layers:
        inputs.append(h)
        z = layer_preactivation(layer, h)
        preacts.append(z)
        h = activate(z, layer.activation)
    logits = h
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits in forward pass")
    n = len(labels)
    lp = log_softmax(logits)
    loss = float(-lp[np.arange(n), labels].mean())
    grad = np.exp(lp)
    grad[np.arange(n), labels] -= 1.0
    grad /= n

    grads = {}
    for i in range(len(model) - 1, first - 1, -1):
        layer = model.layers[i]
        if layer.activation == RELU:
            grad = grad * (preacts[i] > 0)
        xin = inputs[i]
        if layer.kind == DENSE:
            xf = xin.reshape(xin.shape[0], -1)
            if i in wanted:
                db = grad.sum(axis=0) if layer.bias is not None else None
                grads[i] = (grad.T @ xf, db)
            if i > first:
                grad = (grad @ layer.weight).reshape(xin.shape)
        else:
            kh, kw, cin, cout = layer.weight.shape
            cols = im2col(xin, kh, kw, layer.stride, layer.padding)
            g2 = grad.reshape(-1, cout)
            if i in wanted:
                dW = (cols.reshape(-1, cols.shape[-1]).T @ g2).reshape(layer.weight.shape)
                db = g2.sum(axis=0) if layer.bias is not None else None
                grads[i] = (dW, db)
            if i > first:
                dcols = (g2 @ layer.weight_matrix().T).reshape(cols.shape)
                grad = col2im(dcols, xin.shape, kh, kw, layer.stride, layer.padding)
    return loss, grads


def build_tiny_cnn(rng: np.random.Generator, input_shape=(8, 8, 1), channels=(8, 16), n_classes=10) -> ModelGraph:
    """Two 3x3 convs (second one strided) followed by a dense classifier, He-initialised."""
    h, w, cin = input_shape
    c1, c2 = channels
    conv1 = LayerSpec(CONV2D, rng.normal(0, np.sqrt(2 / (9 * cin)), (3, 3, cin, c1)), np.zeros(c1),
                      RELU, stride=1, padding=1, name="conv1")
    conv2 = LayerSpec(CONV2D, rng.normal(0, np.sqrt(2 / (9 * c1)), (3, 3, c1, c2)), np.zeros(c2),
                      RELU, stride=2, padding=1, name="conv2")
    oh = (h + 2 - 3) // 2 + 1
    ow = (w + 2 - 3) // 2 + 1
    fan_in = oh * ow * c2
    fc = LayerSpec(DENSE, rng.normal(0, np.sqrt(1 / fan_in), (n_classes, fan_in)), np.zeros(n_classes),
                   name="fc")
    return ModelGraph([conv1, conv2, fc], tuple(input_shape))


def check_input(model: ModelGraph, x: np.ndarray):
    if tuple(x.shape[1:]) != tuple(model.input_shape):
        raise DimensionError(f"data record shape {tuple(x.shape[1:])} != model input shape {tuple(model.input_shape)}")


def train(model: ModelGraph, x, y, epochs=30, batch_size=64, lr=3e-3, seed=0, log=None) -> ModelGraph:
    """Plain minibatch Adam training of all weights and biases (in place)."""
    from .optim import Adam

    rng = np.random.default_rng(seed)
    params = {}
    for i, layer in enumerate(model.layers):
        params[f"w{i}"] = layer.weight
        if layer.bias is not None:
            params[f"b{i}"] = layer.bias
    opt = Adam(lr=lr)
    n = len(x)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grads = loss_and_grads(model, x[idx], y[idx])
            total += loss * len(idx)
            g = {}
            for i, (dW, db) in grads.items():
                g[f"w{i}"] = dW
                if db is not None:
                    g[f"b{i}"] = db
            opt.step(params, g)
        if log is not None:
            log(f"epoch {epoch + 1}: loss {total / n:.4f}")
    return model
