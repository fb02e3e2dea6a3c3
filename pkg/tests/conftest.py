import numpy as np
import pytest

from roundopt import data


def naive_conv2d(x, W, b=None, stride=1, padding=0):
    """Six nested loops, (h, w, c_in) input, (kh, kw, c_in, c_out) weights."""
    h, w, cin = x.shape
    kh, kw, _, cout = W.shape
    xp = np.zeros((h + 2 * padding, w + 2 * padding, cin))
    xp[padding:padding + h, padding:padding + w] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((oh, ow, cout))
    for i in range(oh):
        for j in range(ow):
            for co in range(cout):
                acc = 0.0
                for a in range(kh):
                    for c in range(kw):
                        for ci in range(cin):
                            acc += xp[i * stride + a, j * stride + c, ci] * W[a, c, ci, co]
                out[i, j, co] = acc + (0.0 if b is None else b[co])
    return out


@pytest.fixture(scope="session")
def bundled():
    model, (xc, yc), (xt, yt) = data.load_bundled()
    return model, xc, yc, xt, yt


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
