"""Bundled desk-scale task: 8x8 grayscale, 10 classes, generated deterministically.

Each class is a template of a few blurred strokes. Samples shift the template
by up to one pixel, rescale its contrast, blend in a little of a random other
class and add Gaussian pixel noise.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

SIZE = 8
N_CLASSES = 10
DATA_SEED = 20200622
TRAIN_SEED = 1
TEST_SEED = 2


def _stroke(img: np.ndarray, p0, p1, steps=24):
    for t in np.linspace(0.0, 1.0, steps):
        r = p0[0] + t * (p1[0] - p0[0])
        c = p0[1] + t * (p1[1] - p0[1])
        ri, ci = int(round(r)), int(round(c))
        if 0 <= ri < img.shape[0] and 0 <= ci < img.shape[1]:
            img[ri, ci] = 1.0


def _blur(img: np.ndarray) -> np.ndarray:
    k = np.array([0.25, 0.5, 0.25])
    out = np.apply_along_axis(lambda r: np.convolve(r, k, mode="same"), 0, img)
    return np.apply_along_axis(lambda r: np.convolve(r, k, mode="same"), 1, out)


def class_templates(seed: int = DATA_SEED) -> np.ndarray:
    rng = np.random.default_rng(seed)
    templates = np.zeros((N_CLASSES, SIZE, SIZE))
    for k in range(N_CLASSES):
        img = np.zeros((SIZE, SIZE))
        for _ in range(3):
            p0 = rng.uniform(1, SIZE - 2, 2)
            p1 = rng.uniform(1, SIZE - 2, 2)
            _stroke(img, p0, p1)
        img = _blur(img)
        templates[k] = img / img.max()
    return templates


def generate(n: int, seed: int, noise: float = 0.25, blend: float = 0.35) -> tuple[np.ndarray, np.ndarray]:
    """``n`` samples ``(N, 8, 8, 1)`` with balanced-in-expectation integer labels."""
    templates = class_templates()
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, N_CLASSES, n)
    other = (labels + rng.integers(1, N_CLASSES, n)) % N_CLASSES
    shifts = rng.integers(-1, 2, (n, 2))
    gain = rng.uniform(0.7, 1.3, n)
    mix = rng.uniform(0.0, blend, n)
    x = np.empty((n, SIZE, SIZE))
    for i in range(n):
        img = gain[i] * templates[labels[i]] + mix[i] * templates[other[i]]
        x[i] = np.roll(img, tuple(shifts[i]), axis=(0, 1))
    x += rng.normal(0.0, noise, x.shape)
    return x[..., None], labels.astype(np.int64)


def to_float32(model):
    """Copy of ``model`` with every tensor rounded to float32, so it survives saving unchanged."""
    layers = [l.with_weight(l.weight.astype(np.float32), None if l.bias is None else l.bias.astype(np.float32))
              for l in model.layers]
    return type(model)(layers, tuple(model.input_shape), dict(model.meta))


def bundled_dir() -> Path:
    return Path(str(resources.files("roundopt") / "data"))


def bundled_model_path() -> Path:
    return bundled_dir() / "tiny_cnn" / "model.json"


def bundled_calib_path() -> Path:
    return bundled_dir() / "calib.bin"


def bundled_test_path() -> Path:
    return bundled_dir() / "test.bin"


def load_bundled():
    """``(model, (x_calib, y_calib), (x_test, y_test))`` from the packaged files."""
    from .model_io import load_calib, load_model

    model = load_model(bundled_model_path())
    xc, yc = load_calib(bundled_calib_path())
    xt, yt = load_calib(bundled_test_path())
    return model, (xc, yc), (xt, yt)
