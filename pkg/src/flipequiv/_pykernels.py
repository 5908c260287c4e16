"""Pure numpy versions of the compiled kernels (same signatures, same results)."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(xp, k, stride, ho, wo):
    # [N, C, Ho, Wo, k, k] strided view, no copy
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def im2col(xp, k, stride, ho, wo):
    n, c = xp.shape[:2]
    win = _windows(xp, k, stride, ho, wo)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)


def col2im(cols, n, c, hp, wp, k, stride, ho, wo):
    out = np.zeros((n, c, hp, wp), dtype=np.float64)
    blocks = cols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    for ki in range(k):
        for kj in range(k):
            out[:, :, ki : ki + (ho - 1) * stride + 1 : stride, kj : kj + (wo - 1) * stride + 1 : stride] += blocks[
                ..., ki, kj
            ]
    return out


def maxpool_forward(xp, k, stride, ho, wo):
    n, c, _, wp = xp.shape
    win = _windows(xp, k, stride, ho, wo).reshape(n, c, ho, wo, k * k)
    # argmax returns the first maximum, i.e. lowest row-major position in the window
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    oh = np.arange(ho)[:, None] * stride
    ow = np.arange(wo)[None, :] * stride
    flat = (oh + local // k) * wp + (ow + local % k)
    return np.ascontiguousarray(out), flat.astype(np.int64)


def maxpool_backward(grad_out, argmax, hp, wp):
    n, c = grad_out.shape[:2]
    out = np.zeros((n, c, hp * wp), dtype=np.float64)
    # overlapping windows may route several outputs to one input cell
    np.add.at(
        out,
        (np.arange(n)[:, None, None, None], np.arange(c)[None, :, None, None], argmax),
        grad_out,
    )
    return out.reshape(n, c, hp, wp)
