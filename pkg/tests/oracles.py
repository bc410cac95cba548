"""Independent reference implementations used to cross-check the package.

Everything here is deliberately written the slow, obvious way (explicit
loops, per-pixel arithmetic) and shares no code with csafm beyond numpy.
"""

import numpy as np


def out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def conv2d_loops(x, w, b, stride, pad):
    """Six-loop cross-correlation. x (n,c,h,w), w (co,c,k,k), b (co,)."""
    n, c, h, wd = x.shape
    co, ci, k, k2 = w.shape
    assert ci == c and k == k2
    oh = out_size(h, k, stride, pad)
    ow = out_size(wd, k, stride, pad)
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=np.float64)
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    out = np.zeros((n, co, oh, ow), dtype=np.float64)
    for ni in range(n):
        for oi in range(co):
            for yi in range(oh):
                for xi in range(ow):
                    acc = 0.0
                    for ci_ in range(c):
                        for ky in range(k):
                            for kx in range(k):
                                acc += (xp[ni, ci_, yi * stride + ky, xi * stride + kx]
                                        * w[oi, ci_, ky, kx])
                    out[ni, oi, yi, xi] = acc + b[oi]
    return out


def maxpool_loops(x, k, stride, pad):
    """Window-scan max pool over a -inf padded input."""
    n, c, h, w = x.shape
    oh = out_size(h, k, stride, pad)
    ow = out_size(w, k, stride, pad)
    xp = np.full((n, c, h + 2 * pad, w + 2 * pad), -np.inf, dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + w] = x
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            for yi in range(oh):
                for xi in range(ow):
                    win = xp[ni, ci, yi * stride:yi * stride + k,
                             xi * stride:xi * stride + k]
                    out[ni, ci, yi, xi] = win.max()
    return out


def gap_loops(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, 1, 1), dtype=np.float64)
    for ni in range(n):
        for ci in range(c):
            out[ni, ci, 0, 0] = sum(
                x[ni, ci, yi, xi] for yi in range(h) for xi in range(w)
            ) / (h * w)
    return out


def pwconv_matvec(x, w, b):
    """1x1 conv as a per-pixel matrix-vector product."""
    n, c, h, wd = x.shape
    co = w.shape[0]
    m = w.reshape(co, c)
    out = np.empty((n, co, h, wd), dtype=np.float64)
    for ni in range(n):
        for yi in range(h):
            for xi in range(wd):
                out[ni, :, yi, xi] = m @ x[ni, :, yi, xi] + b
    return out


def crop_center(x, h, w):
    """Center crop by slicing, offsets floor((H-h)/2)."""
    top = (x.shape[2] - h) // 2
    left = (x.shape[3] - w) // 2
    return x[:, :, top:top + h, left:left + w]


def backbone_shape(h, w, channels, kernels, strides, pads, pool_k=3, pool_s=2, pool_p=1):
    """Shape arithmetic for a conv+pool stage stack; returns (c, h, w)."""
    for k, s, p in zip(kernels, strides, pads):
        h = out_size(h, k, s, p)
        w = out_size(w, k, s, p)
        h = out_size(h, pool_k, pool_s, pool_p)
        w = out_size(w, pool_k, pool_s, pool_p)
    return channels[-1], h, w


def nearest_centroid(train_x, train_y, test_x):
    """Classify flattened images by distance to per-class mean."""
    classes = int(train_y.max()) + 1
    cents = np.stack([train_x[train_y == c].mean(axis=0) for c in range(classes)])
    d = ((test_x[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
    return d.argmin(axis=1)
