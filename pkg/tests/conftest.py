import numpy as np
import pytest

from flipequiv import kernels
from flipequiv import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=sorted(kernels.BACKENDS))
def backend(request, monkeypatch):
    """Run a test once per kernel backend by swapping the dispatch functions."""
    impl = kernels.BACKENDS[request.param]
    for name in ("im2col", "col2im", "maxpool_forward", "maxpool_backward"):
        monkeypatch.setattr(kernels, name, getattr(impl, name))
    return request.param


def naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for i in range(n):
        for o in range(co):
            for r in range(ho):
                for s in range(wo):
                    patch = xp[i, :, r * stride : r * stride + k, s * stride : s * stride + k]
                    out[i, o, r, s] = (patch * w[o]).sum() + b[o]
    return out


def naive_maxpool(x, k, stride, pad):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for r in range(ho):
        for s in range(wo):
            out[:, :, r, s] = xp[:, :, r * stride : r * stride + k, s * stride : s * stride + k].max(axis=(2, 3))
    return out


def tiny_net(rng, batchnorm=False, width=4, classes=3, size=9, flatten=False):
    from flipequiv import model as M

    layers = [M.Conv2d(1, width, 3, 1, 1)]
    if batchnorm:
        layers.append(M.BatchNorm2d(width))
    layers += [M.ReLU(), M.MaxPool(3, 2, 1), M.Conv2d(width, width + 2, 3, 1, 1)]
    if batchnorm:
        layers.append(M.BatchNorm2d(width + 2))
    layers += [M.ReLU()]
    if flatten:
        hw = ((size + 2 - 3) // 2 + 1) ** 2
        layers += [M.Flatten(), M.Linear((width + 2) * hw, 5), M.ReLU(), M.Linear(5, classes)]
    else:
        layers += [M.GlobalAvgPool(), M.Linear(width + 2, classes)]
    net = M.init_network(layers, (1, size, size), rng)
    for k in net.params:
        if k.endswith(("bias", "beta")):
            net.params[k] = 0.1 * rng.standard_normal(net.params[k].shape)
        if k.endswith("gamma"):
            net.params[k] = 1 + 0.2 * rng.standard_normal(net.params[k].shape)
        if k.endswith("running_mean"):
            net.params[k] = 0.1 * rng.standard_normal(net.params[k].shape)
        if k.endswith("running_var"):
            net.params[k] = rng.uniform(0.5, 2.0, net.params[k].shape)
    return net


