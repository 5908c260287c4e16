import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import naive_conv, naive_maxpool
from flipequiv import tensor as T


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv_matches_nested_loops(backend, rng, stride, pad):
    x = rng.standard_normal((2, 3, 7, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    np.testing.assert_allclose(T.conv2d_forward(x, w, b, stride, pad), naive_conv(x, w, b, stride, pad), atol=1e-12)


def test_conv_known_value():
    x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
    w = np.ones((1, 1, 2, 2))
    out = T.conv2d_forward(x, w, np.array([1.0]))
    # top-left window 0+1+4+5 plus bias
    assert out[0, 0, 0, 0] == 11.0
    assert out.shape == (1, 1, 3, 3)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (2, 0)])
def test_conv_backward_finite_differences(backend, rng, stride, pad):
    x = rng.standard_normal((2, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    g = rng.standard_normal(T.conv2d_forward(x, w, b, stride, pad).shape)
    gx, gw, gb = T.conv2d_backward(x, w, g, stride, pad)
    loss_x = lambda v: float((T.conv2d_forward(v, w, b, stride, pad) * g).sum())  # noqa: E731
    loss_w = lambda v: float((T.conv2d_forward(x, v, b, stride, pad) * g).sum())  # noqa: E731
    loss_b = lambda v: float((T.conv2d_forward(x, w, v, stride, pad) * g).sum())  # noqa: E731
    assert T.relative_error(gx, T.finite_difference_grad(loss_x, x)) < 1e-6
    assert T.relative_error(gw, T.finite_difference_grad(loss_w, w)) < 1e-6
    assert T.relative_error(gb, T.finite_difference_grad(loss_b, b)) < 1e-6


def test_conv_shape_errors(rng):
    with pytest.raises(T.ShapeError, match="channel"):
        T.conv2d_forward(rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(T.ShapeError, match="width"):
        T.conv2d_forward(rng.standard_normal((1, 1, 5, 2)), rng.standard_normal((1, 1, 3, 3)), np.zeros(1))
    with pytest.raises(T.ShapeError):
        T.conv2d_forward(rng.standard_normal((1, 1, 5, 5)), rng.standard_normal((1, 1, 3, 3)), np.zeros(2))


def test_linear_forward_backward(rng):
    x, w, b = rng.standard_normal((4, 5)), rng.standard_normal((3, 5)), rng.standard_normal(3)
    np.testing.assert_allclose(T.linear_forward(x, w, b), x @ w.T + b)
    g = rng.standard_normal((4, 3))
    gx, gw, gb = T.linear_backward(x, w, g)
    assert T.relative_error(gx, T.finite_difference_grad(lambda v: float((T.linear_forward(v, w, b) * g).sum()), x)) < 1e-6
    assert T.relative_error(gw, T.finite_difference_grad(lambda v: float((T.linear_forward(x, v, b) * g).sum()), w)) < 1e-6
    np.testing.assert_allclose(gb, g.sum(0))
    with pytest.raises(T.ShapeError):
        T.linear_forward(x, rng.standard_normal((3, 4)), b)


def test_relu_and_backward():
    x = np.array([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(T.relu(x), [0, 0, 2])
    np.testing.assert_array_equal(T.relu_backward(x, np.ones(3)), [0, 0, 1])


@pytest.mark.parametrize("k,stride,pad", [(2, 2, 0), (3, 2, 1), (3, 1, 1), (2, 1, 0)])
def test_maxpool_matches_loops(backend, rng, k, stride, pad):
    x = rng.standard_normal((2, 3, 7, 7))
    np.testing.assert_array_equal(T.maxpool2d_forward(x, k, stride, pad), naive_maxpool(x, k, stride, pad))


@pytest.mark.parametrize("k,stride,pad", [(3, 2, 1), (2, 2, 0)])
def test_maxpool_backward_finite_differences(backend, rng, k, stride, pad):
    x = rng.standard_normal((2, 2, 7, 7))
    g = rng.standard_normal(T.maxpool2d_forward(x, k, stride, pad).shape)
    gx = T.maxpool2d_backward(x, g, k, stride, pad)
    num = T.finite_difference_grad(lambda v: float((T.maxpool2d_forward(v, k, stride, pad) * g).sum()), x)
    assert T.relative_error(gx, num) < 1e-6


def test_maxpool_ties_go_to_first(backend):
    x = np.zeros((1, 1, 2, 2))
    _, arg = T.maxpool2d_forward(x, 2, 2, 0, return_argmax=True)
    gx = T.maxpool2d_backward(x, np.ones((1, 1, 1, 1)), 2, 2, 0, argmax=arg)
    np.testing.assert_array_equal(gx[0, 0], [[1, 0], [0, 0]])


def test_maxpool_rejects_large_pad(rng):
    with pytest.raises(T.ShapeError):
        T.maxpool2d_forward(rng.standard_normal((1, 1, 5, 5)), 2, 2, 2)


def test_global_avgpool(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    np.testing.assert_allclose(T.global_avgpool_forward(x), x.mean(axis=(2, 3)))
    g = rng.standard_normal((2, 3))
    num = T.finite_difference_grad(lambda v: float((T.global_avgpool_forward(v) * g).sum()), x)
    assert T.relative_error(T.global_avgpool_backward(x, g), num) < 1e-6


def test_hflip_is_involution(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    np.testing.assert_array_equal(T.hflip(T.hflip(x)), x)
    np.testing.assert_array_equal(T.hflip(x)[..., 0], x[..., -1])
    with pytest.raises(IndexError):
        T.hflip(x, 4)


def test_permutation_helpers():
    p = np.array([2, 0, 1])
    np.testing.assert_array_equal(T.invert_permutation(p)[p], np.arange(3))
    x = np.arange(6.0).reshape(1, 3, 2)
    np.testing.assert_array_equal(T.permute_channels(x, p)[0, 0], x[0, 2])
    with pytest.raises(ValueError):
        T.check_permutation([0, 0, 1])
    with pytest.raises(ValueError):
        T.check_permutation([0.0, 1.0])


def test_backends_agree(rng):
    from flipequiv import kernels

    if "cython" not in kernels.BACKENDS:
        pytest.skip("compiled kernels not built")
    py, cy = kernels.BACKENDS["python"], kernels.BACKENDS["cython"]
    xp = np.ascontiguousarray(rng.standard_normal((3, 2, 9, 9)))
    np.testing.assert_array_equal(py.im2col(xp, 3, 2, 4, 4), cy.im2col(xp, 3, 2, 4, 4))
    cols = np.ascontiguousarray(rng.standard_normal((3 * 16, 18)))
    np.testing.assert_allclose(py.col2im(cols, 3, 2, 9, 9, 3, 2, 4, 4), cy.col2im(cols, 3, 2, 9, 9, 3, 2, 4, 4), atol=1e-14)
    out_p, arg_p = py.maxpool_forward(xp, 3, 2, 4, 4)
    out_c, arg_c = cy.maxpool_forward(xp, 3, 2, 4, 4)
    np.testing.assert_array_equal(out_p, out_c)
    np.testing.assert_array_equal(arg_p, arg_c)


@settings(max_examples=30, deadline=None)
@given(
    h=st.integers(3, 8),
    w=st.integers(3, 8),
    k=st.integers(1, 3),
    stride=st.integers(1, 3),
    pad=st.integers(0, 1),
    seed=st.integers(0, 2**16),
)
def test_conv_property_matches_loops(h, w, k, stride, pad, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((1, 2, h, w))
    kern = r.standard_normal((2, 2, k, k))
    b = r.standard_normal(2)
    np.testing.assert_allclose(T.conv2d_forward(x, kern, b, stride, pad), naive_conv(x, kern, b, stride, pad), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16), w=st.sampled_from([5, 7, 9, 11]))
def test_conv_flip_equivariance_odd_width(seed, w):
    # tau(conv(x, psi)) == conv(tau(x), tau(psi)) with symmetric padding
    r = np.random.default_rng(seed)
    x = r.standard_normal((1, 2, 5, w))
    kern = r.standard_normal((3, 2, 3, 3))
    b = r.standard_normal(3)
    lhs = T.hflip(T.conv2d_forward(x, kern, b, 1, 1))
    rhs = T.conv2d_forward(T.hflip(x), T.hflip(kern), b, 1, 1)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)
