"""Hot loops of the convolutional layers.

Every kernel exists twice: a numba ``@njit`` loop version (``*_nb``) and a
vectorised numpy version (``*_np``). The public names (``conv2d_forward`` and
friends) are bound to one of the two at import time, see :mod:`mfaba._accel`.

Shapes: images are ``(B, C, H, W)``, conv weights ``(F, C, K, K)``, valid
padding and stride 1. Max-pooling uses a square window of ``size`` with
stride ``size``; trailing rows/cols that do not fill a window are dropped.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import HAS_NUMBA, njit


# --------------------------------------------------------------------- numpy


def conv2d_forward_np(x, w, b):
    k = w.shape[2]
    # windows: (B, C, Ho, Wo, K, K)
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    out = np.einsum("bchwij,fcij->bfhw", win, w, optimize=True)
    return out + b[None, :, None, None]


def conv2d_backward_np(x, w, dout):
    k = w.shape[2]
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    dw = np.einsum("bchwij,bfhw->fcij", win, dout, optimize=True)
    db = dout.sum(axis=(0, 2, 3))
    # full correlation of dout with the flipped kernel
    pad = np.pad(dout, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
    pwin = sliding_window_view(pad, (k, k), axis=(2, 3))
    dx = np.einsum("bfhwij,fcij->bchw", pwin, w[:, :, ::-1, ::-1], optimize=True)
    return dx, dw, db


def maxpool_forward_np(x, size):
    B, C, H, W = x.shape
    Ho, Wo = H // size, W // size
    xs = x[:, :, : Ho * size, : Wo * size].reshape(B, C, Ho, size, Wo, size)
    xs = xs.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, size * size)
    # argmax returns the first maximum, which fixes the tie rule
    idx = np.argmax(xs, axis=-1)
    out = np.take_along_axis(xs, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool_backward_np(dout, idx, in_shape, size):
    B, C, H, W = in_shape
    Ho, Wo = dout.shape[2], dout.shape[3]
    grid = np.zeros((B, C, Ho, Wo, size * size))
    np.put_along_axis(grid, idx[..., None], dout[..., None], axis=-1)
    grid = grid.reshape(B, C, Ho, Wo, size, size).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(in_shape)
    dx[:, :, : Ho * size, : Wo * size] = grid.reshape(B, C, Ho * size, Wo * size)
    return dx


# --------------------------------------------------------------------- numba


@njit(cache=True)
def conv2d_forward_nb(x, w, b):
    B, C, H, W = x.shape
    F, _, K, _ = w.shape
    Ho, Wo = H - K + 1, W - K + 1
    out = np.empty((B, F, Ho, Wo))
    for n in range(B):
        for f in range(F):
            out[n, f] = b[f]
            # weight loops outside, so the inner loop streams along a row
            for c in range(C):
                for u in range(K):
                    for v in range(K):
                        wv = w[f, c, u, v]
                        for i in range(Ho):
                            for j in range(Wo):
                                out[n, f, i, j] += wv * x[n, c, i + u, j + v]
    return out


@njit(cache=True)
def conv2d_backward_nb(x, w, dout):
    B, C, H, W = x.shape
    F, _, K, _ = w.shape
    Ho, Wo = dout.shape[2], dout.shape[3]
    dx = np.zeros((B, C, H, W))
    dw = np.zeros((F, C, K, K))
    db = np.zeros(F)
    for n in range(B):
        for f in range(F):
            for i in range(Ho):
                for j in range(Wo):
                    db[f] += dout[n, f, i, j]
            for c in range(C):
                for u in range(K):
                    for v in range(K):
                        wv = w[f, c, u, v]
                        acc = 0.0
                        for i in range(Ho):
                            for j in range(Wo):
                                g = dout[n, f, i, j]
                                acc += g * x[n, c, i + u, j + v]
                                dx[n, c, i + u, j + v] += g * wv
                        dw[f, c, u, v] += acc
    return dx, dw, db


@njit(cache=True)
def maxpool_forward_nb(x, size):
    B, C, H, W = x.shape
    Ho, Wo = H // size, W // size
    out = np.empty((B, C, Ho, Wo))
    idx = np.empty((B, C, Ho, Wo), dtype=np.int64)
    for n in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    best = x[n, c, i * size, j * size]
                    arg = 0
                    for u in range(size):
                        for v in range(size):
                            val = x[n, c, i * size + u, j * size + v]
                            if val > best:
                                best = val
                                arg = u * size + v
                    out[n, c, i, j] = best
                    idx[n, c, i, j] = arg
    return out, idx


@njit(cache=True)
def _maxpool_backward_nb(dout, idx, dx, size):
    B, C, Ho, Wo = dout.shape
    for n in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    a = idx[n, c, i, j]
                    dx[n, c, i * size + a // size, j * size + a % size] += dout[n, c, i, j]
    return dx


def maxpool_backward_nb(dout, idx, in_shape, size):
    return _maxpool_backward_nb(dout, idx, np.zeros(in_shape), size)


if HAS_NUMBA:
    conv2d_forward = conv2d_forward_nb
    conv2d_backward = conv2d_backward_nb
    maxpool_forward = maxpool_forward_nb
    maxpool_backward = maxpool_backward_nb
else:
    conv2d_forward = conv2d_forward_np
    conv2d_backward = conv2d_backward_np
    maxpool_forward = maxpool_forward_np
    maxpool_backward = maxpool_backward_np
