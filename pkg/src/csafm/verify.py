"""Self-contained correctness checks runnable from the command line.

Each check is a named function that raises AssertionError on failure;
run_all prints one PASS/FAIL line per check and reports overall success.
The oracles here are deliberately naive (nested loops, closed forms) and
independent of the production kernels they certify.
"""

from __future__ import annotations

import io
import os
import sys
import tempfile
from typing import Callable

import numpy as np

from . import ops
from .backbone import feature_shape
from .fusion import (
    ChannelAttnState,
    FusionVariant,
    SpatialAttnState,
    csafm_fuse,
    standardize,
)
from .gradcheck import check_gradients
from .model import FpvCsafmModel, load, save
from .tensor import Rng, Tensor, ewise_add, ewise_mul
from .train import AdamState, adam_step


def _rand(rng: Rng, dims, dtype=np.float32, requires_grad=False, lo=-1.0, hi=1.0) -> Tensor:
    n = int(np.prod(dims))
    return Tensor(rng.uniform(n, lo, hi).astype(dtype).reshape(dims),
                  requires_grad=requires_grad)


def _naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    oc, ic, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, oc, oh, ow), dtype=np.float64)
    for ni in range(n):
        for oi in range(oc):
            for y in range(oh):
                for xj in range(ow):
                    acc = 0.0
                    for ci in range(ic):
                        for u in range(kh):
                            for v in range(kw):
                                acc += float(xp[ni, ci, y * stride + u, xj * stride + v]) \
                                    * float(w[oi, ci, u, v])
                    out[ni, oi, y, xj] = acc + float(b[0, oi, 0, 0])
    return out


def _naive_pool(x, k, stride, pad):
    n, c, h, w = x.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            for y in range(oh):
                for xj in range(ow):
                    best = -np.inf
                    for u in range(k):
                        for v in range(k):
                            yy = y * stride + u - pad
                            xx = xj * stride + v - pad
                            if 0 <= yy < h and 0 <= xx < w:
                                best = max(best, x[ni, ci, yy, xx])
                    out[ni, ci, y, xj] = best
    return out


def check_conv_forward_oracle() -> None:
    rng = Rng(101)
    for t in range(8):
        geo = rng.spawn(t)
        n = 1 + int(geo.below(2))
        ic = 1 + int(geo.below(3))
        oc = 1 + int(geo.below(3))
        k = (3, 1, 5)[int(geo.below(3))]
        stride = 1 + int(geo.below(2))
        pad = int(geo.below(3))
        h = k + int(geo.below(5))
        w = k + int(geo.below(5))
        x = _rand(geo.spawn("x"), (n, ic, h, w))
        wt = _rand(geo.spawn("w"), (oc, ic, k, k))
        b = _rand(geo.spawn("b"), (1, oc, 1, 1))
        got = ops.conv2d(x, ops.ConvParams(wt, b, stride, pad)).data
        want = _naive_conv(x.data, wt.data, b.data, stride, pad)
        err = float(np.abs(got.astype(np.float64) - want).max())
        assert err <= 1e-5, f"conv deviates from loop oracle by {err}"


def check_pool_forward_oracle() -> None:
    rng = Rng(202)
    for t in range(8):
        geo = rng.spawn(t)
        n, c = 1 + int(geo.below(2)), 1 + int(geo.below(3))
        k = 2 + int(geo.below(2))
        stride = 1 + int(geo.below(2))
        pad = int(geo.below(k))
        h = k + int(geo.below(5))
        w = k + int(geo.below(5))
        x = _rand(geo.spawn("x"), (n, c, h, w))
        got = ops.maxpool2d(x, k, stride, pad).data
        want = _naive_pool(x.data, k, stride, pad)
        assert (got == want).all(), "maxpool deviates from scan oracle"


def _gradcheck_layer(build_loss, params, tol) -> None:
    errs = check_gradients(build_loss, params, sample=12)
    worst = max(errs.values())
    assert worst < tol, f"gradcheck rel err {worst:.3g} >= {tol}"


def _sq_mean(t: Tensor) -> Tensor:
    """Smooth scalar test loss: mean of elementwise squares."""
    return ops.mean_all(ewise_mul(t, t))


def check_conv_gradcheck() -> None:
    rng = Rng(303)
    x = _rand(rng.spawn("x"), (2, 2, 6, 7), dtype=np.float64, requires_grad=True)
    w = _rand(rng.spawn("w"), (3, 2, 3, 3), dtype=np.float64, requires_grad=True)
    b = _rand(rng.spawn("b"), (1, 3, 1, 1), dtype=np.float64, requires_grad=True)
    p = ops.ConvParams(w, b, stride=2, pad=1)

    def loss():
        return _sq_mean(ops.conv2d(x, p))

    _gradcheck_layer(loss, [("x", x), ("w", w), ("b", b)], 1e-6)


def check_pool_gradcheck() -> None:
    rng = Rng(404)
    x = _rand(rng.spawn("x"), (2, 2, 6, 6), dtype=np.float64, requires_grad=True)

    def loss():
        return _sq_mean(ops.maxpool2d(x, 3, 2, 1))

    _gradcheck_layer(loss, [("x", x)], 1e-6)


def check_batchnorm_gradcheck() -> None:
    rng = Rng(505)
    x = _rand(rng.spawn("x"), (3, 4, 3, 3), dtype=np.float64, requires_grad=True)
    p = ops.BnParams.init(4, dtype=np.float64)
    p.gamma.data[:] = 1.0 + 0.1 * rng.spawn("g").uniform(4).reshape(1, 4, 1, 1)
    p.beta.data[:] = 0.1 * rng.spawn("b").uniform(4).reshape(1, 4, 1, 1)
    # squared distance to a fixed target; a plain square of the output is
    # nearly invariant to x (normalization cancels it) and roundoff-bound
    target = Tensor(-rng.spawn("t").uniform(x.data.size, -1, 1).reshape(x.dims))

    def loss():
        p2 = ops.BnParams(p.gamma, p.beta, p.running_mean.copy(), p.running_var.copy())
        d = ewise_add(ops.batchnorm(x, p2, "train"), target)
        return ops.mean_all(ewise_mul(d, d))

    _gradcheck_layer(loss, [("x", x), ("gamma", p.gamma), ("beta", p.beta)], 1e-6)


def check_batchnorm_eval_affine() -> None:
    rng = Rng(606)
    x = _rand(rng.spawn("x"), (2, 3, 4, 4))
    p = ops.BnParams.init(3)
    p.running_mean[:] = rng.spawn("m").uniform(3).astype(np.float32)
    p.running_var[:] = (0.5 + rng.spawn("v").uniform(3)).astype(np.float32)
    p.gamma.data[:] = (0.5 + rng.spawn("g").uniform(3)).reshape(1, 3, 1, 1)
    p.beta.data[:] = rng.spawn("b").uniform(3).astype(np.float32).reshape(1, 3, 1, 1)
    got = ops.batchnorm(x, p, "eval").data
    rm = p.running_mean.reshape(1, 3, 1, 1)
    rv = p.running_var.reshape(1, 3, 1, 1)
    want = p.gamma.data * (x.data - rm) / np.sqrt(rv + np.float32(p.eps)) + p.beta.data
    err = float(np.abs(got - want).max())
    assert err <= 1e-6, f"eval batchnorm deviates from affine oracle by {err}"


def check_activation_gradchecks() -> None:
    rng = Rng(707)
    x = _rand(rng.spawn("x"), (2, 3, 4, 4), dtype=np.float64, requires_grad=True, lo=0.1, hi=1.0)

    def loss_r():
        return _sq_mean(ops.relu(x))

    def loss_s():
        return _sq_mean(ops.sigmoid(x))

    _gradcheck_layer(loss_r, [("x", x)], 1e-6)
    x.grad = None
    _gradcheck_layer(loss_s, [("x", x)], 1e-6)


def check_gap_oracle() -> None:
    rng = Rng(808)
    x = _rand(rng.spawn("x"), (2, 3, 5, 4))
    got = ops.gap(x).data
    want = np.empty((2, 3, 1, 1), dtype=np.float64)
    for ni in range(2):
        for ci in range(3):
            acc = 0.0
            for y in range(5):
                for xx in range(4):
                    acc += float(x.data[ni, ci, y, xx])
            want[ni, ci, 0, 0] = acc / 20.0
    err = float(np.abs(got.astype(np.float64) - want).max())
    assert err <= 1e-6, f"gap deviates from loop mean by {err}"
    x64 = Tensor(x.data.astype(np.float64), requires_grad=True)

    def loss():
        return _sq_mean(ops.gap(x64))

    _gradcheck_layer(loss, [("x", x64)], 1e-6)


def check_fc_gradcheck() -> None:
    rng = Rng(909)
    x = _rand(rng.spawn("x"), (3, 6, 1, 1), dtype=np.float64, requires_grad=True)
    w = _rand(rng.spawn("w"), (4, 6, 1, 1), dtype=np.float64, requires_grad=True)
    b = _rand(rng.spawn("b"), (1, 4, 1, 1), dtype=np.float64, requires_grad=True)

    def loss():
        return _sq_mean(ops.fully_connected(x, w, b))

    _gradcheck_layer(loss, [("x", x), ("w", w), ("b", b)], 1e-6)


def check_softmax_xent_grad() -> None:
    rng = Rng(111)
    logits = _rand(rng.spawn("l"), (4, 5, 1, 1), dtype=np.float64, requires_grad=True)
    labels = np.array([0, 3, 2, 4])
    loss, probs = ops.softmax_xent(logits, labels)
    loss.backward()
    onehot = np.zeros((4, 5))
    onehot[np.arange(4), labels] = 1.0
    want = (probs.data.reshape(4, 5) - onehot) / 4.0
    err = float(np.abs(logits.grad.reshape(4, 5) - want).max())
    assert err <= 1e-12, f"softmax/xent gradient deviates from closed form by {err}"


def _zeroed_attention(c: int, r: int):
    rng = Rng(0)
    ca = ChannelAttnState.init(c, r, rng.spawn("ca"))
    sa = SpatialAttnState.init(c, r, rng.spawn("sa"))
    for _, t in ca.parameters():
        t.data[:] = 0.0
    sa.conv1.weight.data[:] = 0.0
    sa.conv1.bias.data[:] = 0.0
    sa.conv2.weight.data[:] = 0.0
    sa.conv2.bias.data[:] = 0.0
    sa.bn1.beta.data[:] = 0.0
    sa.bn2.beta.data[:] = 0.0
    return ca, sa


def check_fusion_half_identity() -> None:
    rng = Rng(222)
    ca, sa = _zeroed_attention(8, 4)
    a = _rand(rng.spawn("a"), (2, 8, 4, 4))
    b = _rand(rng.spawn("b"), (2, 8, 4, 4))
    z = csafm_fuse(a, b, ca, sa, "eval")
    want = np.float32(0.25) * (a.data + b.data)
    assert (z.data == want).all(), "zero-attention fusion != 0.25*(a+b) exactly"


def check_fusion_coefficient_range() -> None:
    rng = Rng(333)
    ca = ChannelAttnState.init(8, 4, rng.spawn("ca"))
    sa = SpatialAttnState.init(8, 4, rng.spawn("sa"))
    for t in range(10):
        a = _rand(rng.spawn("a", t), (1, 8, 5, 5))
        b = _rand(rng.spawn("b", t), (1, 8, 5, 5))
        _, parts = csafm_fuse(a, b, ca, sa, "eval", return_parts=True)
        for key in ("f_c_final", "f_s_final"):
            v = parts[key].data
            assert (v > 0).all() and (v < 1).all(), f"{key} outside (0,1)"


def check_shape_pipeline() -> None:
    c, h, w = feature_shape(200, 400)
    assert (c, h, w) == (512, 4, 7), f"200x400 backbone shape {(c, h, w)} != (512,4,7)"
    a = Tensor(np.zeros((1, 512, 4, 7), dtype=np.float32))
    b = Tensor(np.zeros((1, 512, 3, 9), dtype=np.float32))
    sa, sb = standardize(a, b)
    assert sa.dims == (1, 512, 3, 7) and sb.dims == (1, 512, 3, 7), \
        f"standardize produced {sa.dims} / {sb.dims}"


def check_e2e_gradcheck() -> None:
    rng = Rng(444)
    m = FpvCsafmModel.build(
        classes=3, fp_size=(20, 20), fv_size=(20, 20),
        variant=FusionVariant.CSAFM, rng=rng.spawn("model"),
        r1=4, r2=4, width_multiplier=1.0 / 16.0, dtype=np.float64,
    )
    fp = _rand(rng.spawn("fp"), (2, 1, 20, 20), dtype=np.float64)
    fv = _rand(rng.spawn("fv"), (2, 1, 20, 20), dtype=np.float64)
    labels = np.array([0, 2])
    probe = [
        ("fp.conv1.weight", m.fp_backbone.convs[0].weight),
        ("fv.conv5.weight", m.fv_backbone.convs[4].weight),
        ("fusion.pw1.weight", m.fusion.channel.pw1.weight),
        ("fusion.spconv2.weight", m.fusion.spatial.conv2.weight),
        ("head.weight", m.head_w),
    ]

    def loss():
        logits = m.forward_batch(fp, fv, "eval")
        return ops.softmax_xent(logits, labels)[0]

    errs = check_gradients(loss, probe, sample=6)
    worst = max(errs.values())
    assert worst < 1e-5, f"end-to-end gradcheck rel err {worst:.3g}"


def check_weight_roundtrip() -> None:
    rng = Rng(555)
    m = FpvCsafmModel.build(
        classes=4, fp_size=(33, 33), fv_size=(33, 33),
        variant=FusionVariant.CSAFM, rng=rng.spawn("model"),
        r1=4, r2=4, width_multiplier=1.0 / 16.0,
    )
    fp = _rand(rng.spawn("fp"), (2, 1, 33, 33))
    fv = _rand(rng.spawn("fv"), (2, 1, 33, 33))
    before = m.forward_batch(fp, fv, "eval").data.copy()
    with tempfile.TemporaryDirectory() as td:
        path = os.path.join(td, "w.csafm")
        save(m, path)
        m2 = load(path)
    for (n1, a1, _), (n2, a2, _) in zip(m.state_entries(), m2.state_entries()):
        assert n1 == n2 and a1.shape == a2.shape and (a1 == a2).all(), \
            f"round trip altered {n1}"
    after = m2.forward_batch(fp, fv, "eval").data
    assert (before == after).all(), "round trip altered eval logits"


def check_adam_first_step() -> None:
    st = AdamState(lr=0.01)
    p = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32), requires_grad=True)
    p.grad = np.ones((1, 1, 1, 1), dtype=np.float32)
    adam_step([("p", p)], st)
    delta = float(p.data.reshape(())) - 1.0
    want = -0.01 / (1.0 + 1e-8)
    assert abs(delta - want) <= 0.01 * 1e-5, f"first Adam step {delta} != {want}"
    st2 = AdamState(lr=0.01)
    q = Tensor(np.full((1, 1, 1, 1), 3.0, dtype=np.float32), requires_grad=True)
    q.grad = np.zeros((1, 1, 1, 1), dtype=np.float32)
    adam_step([("q", q)], st2)
    assert float(q.data.reshape(())) == 3.0, "zero gradient moved a parameter"


CHECKS: list[tuple[str, Callable[[], None]]] = [
    ("conv_forward_oracle", check_conv_forward_oracle),
    ("conv_gradcheck", check_conv_gradcheck),
    ("pool_forward_oracle", check_pool_forward_oracle),
    ("pool_gradcheck", check_pool_gradcheck),
    ("batchnorm_gradcheck", check_batchnorm_gradcheck),
    ("batchnorm_eval_affine", check_batchnorm_eval_affine),
    ("activation_gradchecks", check_activation_gradchecks),
    ("gap_oracle", check_gap_oracle),
    ("fc_gradcheck", check_fc_gradcheck),
    ("softmax_xent_grad", check_softmax_xent_grad),
    ("fusion_half_identity", check_fusion_half_identity),
    ("fusion_coefficient_range", check_fusion_coefficient_range),
    ("shape_pipeline", check_shape_pipeline),
    ("e2e_gradcheck", check_e2e_gradcheck),
    ("weight_roundtrip", check_weight_roundtrip),
    ("adam_first_step", check_adam_first_step),
]


def run_all(out=None) -> bool:
    """Run every check; print one PASS/FAIL line each; True iff all pass."""
    out = out if out is not None else sys.stdout
    ok = True
    for name, fn in CHECKS:
        try:
            fn()
        except Exception as e:  # report and continue; the suite must finish
            ok = False
            print(f"FAIL {name}: {e}", file=out)
        else:
            print(f"PASS {name}", file=out)
    return ok
