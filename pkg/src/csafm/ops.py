"""Forward and backward implementations of every layer primitive.

Convolution is cross-correlation (no kernel flip) with symmetric zero
padding. All ops preserve the input dtype so the float64 gradient-check
path runs through identical code.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, ParameterError
from .tensor import Tensor, accumulate_grad, make_node


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


@dataclass
class ConvParams:
    """Weights for one convolution: weight (out_c, in_c, kh, kw), bias (1, out_c, 1, 1)."""

    weight: Tensor
    bias: Tensor
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        oc, ic, kh, kw = self.weight.dims
        if kh != kw:
            raise DimensionError(f"square kernels only; got {kh}x{kw}")
        if self.bias.dims != (1, oc, 1, 1):
            raise DimensionError(
                f"bias dims {self.bias.dims} do not match out channels {oc}"
            )
        if self.stride < 1 or self.pad < 0:
            raise ParameterError(f"bad stride/pad: {self.stride}/{self.pad}")

    @property
    def out_c(self) -> int:
        return self.weight.dims[0]

    @property
    def in_c(self) -> int:
        return self.weight.dims[1]

    @property
    def k(self) -> int:
        return self.weight.dims[2]

    @classmethod
    def he_init(cls, in_c, out_c, k, stride, pad, rng, dtype=np.float32) -> "ConvParams":
        # He-normal: std = sqrt(2 / fan_in), zero bias
        if min(in_c, out_c, k) < 1:
            raise ParameterError(
                f"channel counts and kernel must be >= 1, got {in_c}/{out_c}/{k}"
            )
        std = float(np.sqrt(2.0 / (in_c * k * k)))
        w = rng.normal(out_c * in_c * k * k, 0.0, std).astype(dtype)
        weight = Tensor(w.reshape(out_c, in_c, k, k), requires_grad=True)
        bias = Tensor(np.zeros((1, out_c, 1, 1), dtype=dtype), requires_grad=True)
        return cls(weight=weight, bias=bias, stride=stride, pad=pad)


@dataclass
class BnParams:
    """Batch-norm state: learnable gamma/beta plus running statistics.

    Running statistics track the biased (1/m) batch moments; eval mode
    normalizes by them, so running_var stays >= 0.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        c = self.gamma.dims[1]
        if self.beta.dims != (1, c, 1, 1):
            raise DimensionError("gamma/beta channel counts differ")
        if self.running_mean.shape != (c,) or self.running_var.shape != (c,):
            raise DimensionError("running stats must be per-channel vectors")
        if not (0.0 < self.momentum < 1.0):
            raise ParameterError(f"momentum must lie in (0,1), got {self.momentum}")
        if self.eps <= 0.0:
            raise ParameterError(f"eps must be positive, got {self.eps}")

    @property
    def channels(self) -> int:
        return self.gamma.dims[1]

    @classmethod
    def init(cls, c: int, dtype=np.float32, momentum: float = 0.1, eps: float = 1e-5) -> "BnParams":
        return cls(
            gamma=Tensor(np.ones((1, c, 1, 1), dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros((1, c, 1, 1), dtype=dtype), requires_grad=True),
            running_mean=np.zeros(c, dtype=dtype),
            running_var=np.ones(c, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlation with zero padding and per-channel bias."""
    n, c, h, w = x.dims
    if c != p.in_c:
        raise DimensionError(f"conv2d input has {c} channels, weights expect {p.in_c}")
    k, s, pad = p.k, p.stride, p.pad
    oh = conv_out_size(h, k, s, pad)
    ow = conv_out_size(w, k, s, pad)
    if oh < 1 or ow < 1:
        raise DimensionError(
            f"conv2d output dims {oh}x{ow} non-positive for input {h}x{w}, "
            f"kernel {k}, stride {s}, pad {pad}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    # win: (n, c, oh, ow, k, k); weight: (oc, c, k, k)
    out = np.tensordot(win, p.weight.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + p.bias.data

    def bw(g: np.ndarray) -> None:
        accumulate_grad(p.bias, g.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1))
        dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        accumulate_grad(p.weight, dw)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    # (n, oc, oh, ow) x (oc, ic) -> (n, oh, ow, ic)
                    contrib = np.tensordot(g, p.weight.data[:, :, i, j], axes=([1], [0]))
                    dxp[:, :, i : i + s * oh : s, j : j + s * ow : s] += (
                        contrib.transpose(0, 3, 1, 2)
                    )
            if pad:
                dx = dxp[:, :, pad : pad + h, pad : pad + w]
            else:
                dx = dxp
            accumulate_grad(x, dx)

    return make_node(out, (x, p.weight, p.bias), bw)


def pwconv(x: Tensor, p: ConvParams) -> Tensor:
    """Pointwise (1x1) convolution mixing channels without spatial extent."""
    if p.k != 1 or p.stride != 1 or p.pad != 0:
        raise ParameterError(
            f"pwconv requires k=1, stride=1, pad=0; got k={p.k} "
            f"stride={p.stride} pad={p.pad}"
        )
    return conv2d(x, p)


def maxpool2d(x: Tensor, k: int, stride: int, pad: int) -> Tensor:
    """Per-window max; gradient routes to the first argmax in row-major scan."""
    n, c, h, w = x.dims
    oh = conv_out_size(h, k, stride, pad)
    ow = conv_out_size(w, k, stride, pad)
    if oh < 1 or ow < 1:
        raise DimensionError(
            f"maxpool2d output dims {oh}x{ow} non-positive for input {h}x{w}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
                constant_values=-np.inf)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, oh, ow, k * k)
    arg = flat.argmax(axis=4)
    out = np.take_along_axis(flat, arg[..., None], axis=4)[..., 0]
    if np.isneginf(out).any():
        raise DimensionError("maxpool2d window entirely in padding")

    def bw(g: np.ndarray) -> None:
        if not x.requires_grad:
            return
        dxp = np.zeros_like(xp)
        ni, ci, oi, oj = np.indices((n, c, oh, ow))
        rows = oi * stride + arg // k
        cols = oj * stride + arg % k
        np.add.at(dxp, (ni, ci, rows, cols), g)
        if pad:
            accumulate_grad(x, dxp[:, :, pad : pad + h, pad : pad + w])
        else:
            accumulate_grad(x, dxp)

    return make_node(np.ascontiguousarray(out), (x,), bw)


def batchnorm(x: Tensor, p: BnParams, mode: str) -> Tensor:
    """Per-channel normalization over (n,h,w); train mode updates running stats."""
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    n, c, h, w = x.dims
    if c != p.channels:
        raise DimensionError(f"batchnorm input has {c} channels, params expect {p.channels}")
    dt = x.data.dtype
    eps = dt.type(p.eps)

    if mode == "train":
        m = n * h * w
        if m < 2:
            raise DimensionError(f"train-mode batchnorm needs n*h*w >= 2, got {m}")
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        var = x.data.var(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv_std
        out = p.gamma.data * xhat + p.beta.data

        mom = dt.type(p.momentum)
        p.running_mean *= 1 - mom
        p.running_mean += mom * mu.reshape(c)
        p.running_var *= 1 - mom
        p.running_var += mom * var.reshape(c)

        def bw(g: np.ndarray) -> None:
            accumulate_grad(p.beta, g.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1))
            accumulate_grad(p.gamma, (g * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1))
            if x.requires_grad:
                gm = g.mean(axis=(0, 2, 3), keepdims=True)
                gxm = (g * xhat).mean(axis=(0, 2, 3), keepdims=True)
                dx = p.gamma.data * inv_std * (g - gm - xhat * gxm)
                accumulate_grad(x, dx)

        return make_node(out, (x, p.gamma, p.beta), bw)

    rm = p.running_mean.reshape(1, c, 1, 1)
    rv = p.running_var.reshape(1, c, 1, 1)
    inv_std_e = 1.0 / np.sqrt(rv + eps)
    xhat_e = (x.data - rm) * inv_std_e
    out = p.gamma.data * xhat_e + p.beta.data

    def bw_eval(g: np.ndarray) -> None:
        accumulate_grad(p.beta, g.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1))
        accumulate_grad(p.gamma, (g * xhat_e).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1))
        if x.requires_grad:
            accumulate_grad(x, g * (p.gamma.data * inv_std_e))

    return make_node(out, (x, p.gamma, p.beta), bw_eval)


def relu(x: Tensor) -> Tensor:
    """max(0, x); gradient is 0 at and below zero."""
    mask = x.data > 0
    out = np.where(mask, x.data, x.data.dtype.type(0))

    def bw(g: np.ndarray) -> None:
        accumulate_grad(x, g * mask)

    return make_node(out, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    """1/(1+exp(-x)), stable for large |x|."""
    d = x.data
    with np.errstate(over="ignore"):
        out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-d)),
                       np.exp(np.minimum(d, 0)) / (1.0 + np.exp(np.minimum(d, 0))))
    out = out.astype(d.dtype)

    def bw(g: np.ndarray) -> None:
        accumulate_grad(x, g * out * (1.0 - out))

    return make_node(out, (x,), bw)


def gap(x: Tensor) -> Tensor:
    """Global average pool: mean over (h,w) per channel, output (n,c,1,1)."""
    hw = x.h * x.w
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def bw(g: np.ndarray) -> None:
        accumulate_grad(x, np.broadcast_to(g / hw, x.dims))

    return make_node(out, (x,), bw)


def mean_all(x: Tensor) -> Tensor:
    """Mean over every element, as a (1,1,1,1) scalar node."""
    size = x.data.size
    out = np.array(x.data.mean(), dtype=x.data.dtype).reshape(1, 1, 1, 1)

    def bw(g: np.ndarray) -> None:
        accumulate_grad(x, np.broadcast_to(g.reshape(()) / size, x.dims).astype(x.data.dtype))

    return make_node(out, (x,), bw)


def flatten(x: Tensor) -> Tensor:
    """(n,c,h,w) -> (n, c*h*w, 1, 1), data order preserved."""
    n = x.n
    out = x.data.reshape(n, -1, 1, 1)

    def bw(g: np.ndarray) -> None:
        accumulate_grad(x, g.reshape(x.dims))

    return make_node(out, (x,), bw)


def unflatten(x: Tensor, dims) -> Tensor:
    """Inverse of flatten back to the given rank-4 dims."""
    if int(np.prod(dims)) != x.data.size:
        raise DimensionError(f"cannot unflatten {x.dims} to {tuple(dims)}")
    out = x.data.reshape(dims)

    def bw(g: np.ndarray) -> None:
        accumulate_grad(x, g.reshape(x.dims))

    return make_node(out, (x,), bw)


def fully_connected(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map on flattened rows: (n,d,1,1) x (d_out,d,1,1) -> (n,d_out,1,1)."""
    n, d = x.n, x.c
    if x.h != 1 or x.w != 1:
        raise DimensionError(f"fully_connected expects flattened input, got {x.dims}")
    d_out, d_w = w.dims[0], w.dims[1]
    if d_w != d or w.dims[2:] != (1, 1):
        raise DimensionError(f"weight dims {w.dims} incompatible with input dim {d}")
    if b.dims != (1, d_out, 1, 1):
        raise DimensionError(f"bias dims {b.dims} do not match output dim {d_out}")
    x2 = x.data.reshape(n, d)
    w2 = w.data.reshape(d_out, d)
    out = (x2 @ w2.T + b.data.reshape(1, d_out)).reshape(n, d_out, 1, 1)

    def bw(g: np.ndarray) -> None:
        g2 = g.reshape(n, d_out)
        accumulate_grad(b, g2.sum(axis=0).reshape(1, d_out, 1, 1))
        accumulate_grad(w, (g2.T @ x2).reshape(d_out, d, 1, 1))
        if x.requires_grad:
            accumulate_grad(x, (g2 @ w2).reshape(x.dims))

    return make_node(out, (x, w, b), bw)


def softmax_xent(logits: Tensor, labels: np.ndarray) -> tuple[Tensor, Tensor]:
    """Row-wise stable softmax + mean cross-entropy.

    Returns (loss, probs): loss is a (1,1,1,1) graph node whose backward
    seeds (probs - onehot)/n into the logits; probs is detached.
    """
    n, k = logits.n, logits.c
    if logits.h != 1 or logits.w != 1:
        raise DimensionError(f"logits must be (n,k,1,1), got {logits.dims}")
    y = np.asarray(labels)
    if y.shape != (n,):
        raise DimensionError(f"labels shape {y.shape} != batch size {n}")
    if y.min() < 0 or y.max() >= k:
        raise ParameterError(f"label out of range [0,{k}): {y.min()}..{y.max()}")

    z = logits.data.reshape(n, k)
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    nll = -np.log(np.maximum(p[np.arange(n), y], np.finfo(z.dtype).tiny))
    loss_val = np.array(nll.mean(), dtype=z.dtype).reshape(1, 1, 1, 1)

    def bw(g: np.ndarray) -> None:
        d = p.copy()
        d[np.arange(n), y] -= 1
        d *= g.reshape(()) / n
        accumulate_grad(logits, d.reshape(logits.dims))

    loss = make_node(loss_val, (logits,), bw)
    probs = Tensor(p.reshape(n, k, 1, 1).copy())
    return loss, probs
