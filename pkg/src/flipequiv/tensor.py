"""Layer primitives on dense float64 arrays.

All functions are pure: they never modify their inputs.  Shapes are
checked explicitly and nothing is broadcast implicitly.  Layouts are
NCHW for images/feature maps and [Cout, Cin, k, k] for kernels.

Permutation convention (used everywhere in the package): a permutation
array ``perm`` maps destination index to source index, so
``permute_channels(x, perm)[i] == x[perm[i]]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from flipequiv import kernels

RNG_ALGORITHM = "numpy.PCG64"


class ShapeError(ValueError):
    """Raised when operand shapes do not compose."""


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator; every artifact records ``RNG_ALGORITHM``."""
    return np.random.Generator(np.random.PCG64(seed))


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def _check_rank(x, rank, name):
    if x.ndim != rank:
        raise ShapeError(f"{name}: expected rank {rank}, got shape {x.shape}")


@dataclass(frozen=True)
class ConvGeometry:
    n: int
    c_in: int
    h: int
    w: int
    c_out: int
    k: int
    stride: int
    pad: int

    @property
    def hp(self):
        return self.h + 2 * self.pad

    @property
    def wp(self):
        return self.w + 2 * self.pad

    @property
    def ho(self):
        return (self.hp - self.k) // self.stride + 1

    @property
    def wo(self):
        return (self.wp - self.k) // self.stride + 1


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    if k > size + 2 * pad:
        raise ShapeError(f"window {k} larger than padded extent {size + 2 * pad}")
    return (size + 2 * pad - k) // stride + 1


def _conv_geometry(x, kernel, stride, pad) -> ConvGeometry:
    _check_rank(x, 4, "input")
    _check_rank(kernel, 4, "kernel")
    if stride < 1 or pad < 0:
        raise ShapeError(f"stride must be >= 1 and pad >= 0 (got stride={stride}, pad={pad})")
    n, c_in, h, w = x.shape
    c_out, kc, kh, kw = kernel.shape
    if kc != c_in:
        raise ShapeError(f"channel dimension mismatch: input has {c_in}, kernel expects {kc}")
    if kh != kw:
        raise ShapeError(f"kernel must be square, got {kh}x{kw}")
    if kh > h + 2 * pad:
        raise ShapeError(f"height: kernel {kh} exceeds padded input height {h + 2 * pad}")
    if kw > w + 2 * pad:
        raise ShapeError(f"width: kernel {kw} exceeds padded input width {w + 2 * pad}")
    return ConvGeometry(n, c_in, h, w, c_out, kh, stride, pad)


def _pad(x, pad, value=0.0):
    if pad == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def conv2d_forward(x, kernel, bias, stride: int = 1, pad: int = 0, return_cols: bool = False):
    """Cross-correlation with zero padding; output [N, Cout, H', W']."""
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    g = _conv_geometry(x, kernel, stride, pad)
    if bias.shape != (g.c_out,):
        raise ShapeError(f"bias: expected shape ({g.c_out},), got {bias.shape}")
    cols = kernels.im2col(_pad(x, pad), g.k, stride, g.ho, g.wo)
    out = cols @ kernel.reshape(g.c_out, -1).T
    out += bias
    out = np.ascontiguousarray(out.reshape(g.n, g.ho, g.wo, g.c_out).transpose(0, 3, 1, 2))
    return (out, cols) if return_cols else out


def conv2d_backward(x, kernel, grad_out, stride: int = 1, pad: int = 0, cols=None):
    """Gradients of ``sum(grad_out * conv2d_forward(x, kernel, b))``.

    Returns ``(grad_x, grad_kernel, grad_bias)``.  ``cols`` may carry the
    patch matrix saved by the forward pass.
    """
    x, kernel, grad_out = as_tensor(x), as_tensor(kernel), as_tensor(grad_out)
    g = _conv_geometry(x, kernel, stride, pad)
    if grad_out.shape != (g.n, g.c_out, g.ho, g.wo):
        raise ShapeError(f"grad_out: expected {(g.n, g.c_out, g.ho, g.wo)}, got {grad_out.shape}")
    if cols is None:
        cols = kernels.im2col(_pad(x, pad), g.k, stride, g.ho, g.wo)
    g2 = grad_out.transpose(0, 2, 3, 1).reshape(-1, g.c_out)
    grad_kernel = (g2.T @ cols).reshape(kernel.shape)
    grad_bias = g2.sum(axis=0)
    dcols = np.ascontiguousarray(g2 @ kernel.reshape(g.c_out, -1))
    dxp = kernels.col2im(dcols, g.n, g.c_in, g.hp, g.wp, g.k, stride, g.ho, g.wo)
    grad_x = dxp[:, :, pad : pad + g.h, pad : pad + g.w] if pad else dxp
    return np.ascontiguousarray(grad_x), grad_kernel, grad_bias


def linear_forward(x, weight, bias):
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    _check_rank(x, 2, "input")
    _check_rank(weight, 2, "weight")
    if weight.shape[1] != x.shape[1]:
        raise ShapeError(f"feature dimension mismatch: input has {x.shape[1]}, weight expects {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias: expected shape ({weight.shape[0]},), got {bias.shape}")
    return x @ weight.T + bias


def linear_backward(x, weight, grad_out):
    x, weight, grad_out = as_tensor(x), as_tensor(weight), as_tensor(grad_out)
    if grad_out.shape != (x.shape[0], weight.shape[0]):
        raise ShapeError(f"grad_out: expected {(x.shape[0], weight.shape[0])}, got {grad_out.shape}")
    return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)


def relu(x):
    return np.maximum(as_tensor(x), 0.0)


def relu_backward(x, grad_out):
    x, grad_out = as_tensor(x), as_tensor(grad_out)
    if x.shape != grad_out.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} differs from input shape {x.shape}")
    return np.where(x > 0, grad_out, 0.0)


def hflip(x, axis: int = -1):
    """Reverse ``axis``; with the default it flips the width of NCHW data."""
    x = np.asarray(x)
    if not -x.ndim <= axis < x.ndim:
        raise IndexError(f"axis {axis} out of range for rank {x.ndim}")
    return np.ascontiguousarray(np.flip(x, axis=axis))


def check_permutation(perm, size: int | None = None) -> np.ndarray:
    p = np.asarray(perm)
    if p.ndim != 1 or not np.issubdtype(p.dtype, np.integer):
        raise ValueError("permutation must be a 1-d integer array")
    if size is not None and p.size != size:
        raise ValueError(f"permutation has length {p.size}, expected {size}")
    if not np.array_equal(np.sort(p), np.arange(p.size)):
        raise ValueError(f"not a bijection on range({p.size}): {p.tolist()}")
    return p.astype(np.int64)


def invert_permutation(perm) -> np.ndarray:
    p = check_permutation(perm)
    inv = np.empty_like(p)
    inv[p] = np.arange(p.size)
    return inv


def permute_channels(x, perm, axis: int = 1):
    """``out[..., i, ...] = x[..., perm[i], ...]`` along ``axis``."""
    x = np.asarray(x)
    p = check_permutation(perm, x.shape[axis])
    return np.ascontiguousarray(np.take(x, p, axis=axis))


def maxpool2d_forward(x, k: int, stride: int, pad: int = 0, return_argmax: bool = False):
    """Max pooling; padded cells never win.  Ties go to the lowest flat index."""
    x = as_tensor(x)
    _check_rank(x, 4, "input")
    n, c, h, w = x.shape
    if pad >= k and k > 0:
        raise ShapeError(f"pad {pad} must be smaller than window {k}")
    ho = conv_output_size(h, k, stride, pad)
    wo = conv_output_size(w, k, stride, pad)
    out, arg = kernels.maxpool_forward(_pad(x, pad, -np.inf), k, stride, ho, wo)
    return (out, arg) if return_argmax else out


def maxpool2d_backward(x, grad_out, k: int, stride: int, pad: int = 0, argmax=None):
    x, grad_out = as_tensor(x), as_tensor(grad_out)
    n, c, h, w = x.shape
    if argmax is None:
        _, argmax = maxpool2d_forward(x, k, stride, pad, return_argmax=True)
    if grad_out.shape != argmax.shape:
        raise ShapeError(f"grad_out: expected {argmax.shape}, got {grad_out.shape}")
    dxp = kernels.maxpool_backward(grad_out, argmax, h + 2 * pad, w + 2 * pad)
    return np.ascontiguousarray(dxp[:, :, pad : pad + h, pad : pad + w])


def global_avgpool_forward(x):
    x = as_tensor(x)
    _check_rank(x, 4, "input")
    return x.mean(axis=(2, 3))


def global_avgpool_backward(x, grad_out):
    x, grad_out = as_tensor(x), as_tensor(grad_out)
    n, c, h, w = x.shape
    if grad_out.shape != (n, c):
        raise ShapeError(f"grad_out: expected {(n, c)}, got {grad_out.shape}")
    return np.broadcast_to((grad_out / (h * w))[:, :, None, None], x.shape).copy()


def finite_difference_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (one evaluation pair per entry)."""
    x = as_tensor(x).copy()
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)
