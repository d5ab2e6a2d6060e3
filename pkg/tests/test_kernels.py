import numpy as np
import pytest

from mfaba import kernels


@pytest.fixture(params=[(1, 1, 5, 5, 1, 3), (3, 2, 8, 8, 4, 3), (2, 3, 9, 7, 2, 2)])
def conv_case(request):
    B, C, H, W, F, K = request.param
    rng = np.random.default_rng(sum(request.param))
    return (rng.normal(size=(B, C, H, W)), rng.normal(size=(F, C, K, K)), rng.normal(size=F))


def test_conv_forward_paths_agree(conv_case):
    x, w, b = conv_case
    np.testing.assert_allclose(kernels.conv2d_forward_nb(x, w, b), kernels.conv2d_forward_np(x, w, b),
                               rtol=1e-12, atol=1e-12)


def test_conv_forward_matches_direct_sum(conv_case):
    x, w, b = conv_case
    out = kernels.conv2d_forward_np(x, w, b)
    K = w.shape[2]
    n, f, i, j = 0, w.shape[0] - 1, 1, 0
    direct = b[f] + np.sum(x[n, :, i:i + K, j:j + K] * w[f])
    assert out[n, f, i, j] == pytest.approx(direct, rel=1e-12)


def test_conv_backward_paths_agree(conv_case):
    x, w, b = conv_case
    dout = np.random.default_rng(0).normal(size=kernels.conv2d_forward_np(x, w, b).shape)
    for a, c in zip(kernels.conv2d_backward_nb(x, w, dout), kernels.conv2d_backward_np(x, w, dout)):
        np.testing.assert_allclose(a, c, rtol=1e-12, atol=1e-12)


def test_conv_backward_is_adjoint(conv_case):
    # <conv(x), d> is linear in x, so its x-gradient is dx
    x, w, b = conv_case
    rng = np.random.default_rng(1)
    d = rng.normal(size=kernels.conv2d_forward_np(x, w, b).shape)
    v = rng.normal(size=x.shape)
    dx, _, _ = kernels.conv2d_backward_np(x, w, d)
    zero = np.zeros_like(b)
    lhs = np.sum(kernels.conv2d_forward_np(v, w, zero) * d)
    assert lhs == pytest.approx(np.sum(v * dx), rel=1e-10)


@pytest.mark.parametrize("shape", [(2, 3, 8, 8), (1, 1, 7, 5)])
def test_maxpool_paths_agree(shape):
    x = np.random.default_rng(3).normal(size=shape)
    o1, i1 = kernels.maxpool_forward_np(x, 2)
    o2, i2 = kernels.maxpool_forward_nb(x, 2)
    np.testing.assert_array_equal(o1, o2)
    np.testing.assert_array_equal(i1, i2)
    d = np.random.default_rng(4).normal(size=o1.shape)
    np.testing.assert_array_equal(kernels.maxpool_backward_np(d, i1, shape, 2),
                                  kernels.maxpool_backward_nb(d, i2, shape, 2))


def test_maxpool_tie_goes_to_first():
    x = np.ones((1, 1, 2, 2))
    out, idx = kernels.maxpool_forward(x, 2)
    assert out[0, 0, 0, 0] == 1.0 and idx[0, 0, 0, 0] == 0
