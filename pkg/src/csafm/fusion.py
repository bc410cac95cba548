"""Attention-weighted fusion of two modality feature maps.

The full block: sum the standardized maps (IFI), weight by a channel
attention map, squash to per-element coefficients, weight by a spatial
attention map, squash again, then mix the two branches with the
complementary coefficients

    Z = f_fp * Fc * Fs + f_fv * (1 - Fc) * (1 - Fs)

Six alternative compositions (single-attention, parallel, reversed
order, plain sum, channel concat) are selectable for comparison runs.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, DimensionError
from .ops import BnParams, ConvParams, batchnorm, conv2d, gap, pwconv, relu, sigmoid
from .tensor import Rng, Tensor, accumulate_grad, ewise_add, ewise_mul, make_node, one_minus


class FusionVariant(enum.Enum):
    CSAFM = "CSAFM"
    CHANNEL_ONLY = "CHANNEL_ONLY"
    SPATIAL_ONLY = "SPATIAL_ONLY"
    PARALLEL_CS = "PARALLEL_CS"
    SEQ_SC = "SEQ_SC"
    SERIAL_SUM = "SERIAL_SUM"
    PARALLEL_CONCAT = "PARALLEL_CONCAT"

    @classmethod
    def from_tag(cls, tag: str) -> "FusionVariant":
        try:
            return cls[tag]
        except KeyError:
            raise ConfigError(
                f"unknown fusion variant {tag!r}; choose one of "
                f"{', '.join(v.name for v in cls)}"
            ) from None


# variants whose attention maps carry parameters
_NEEDS_CHANNEL = {FusionVariant.CSAFM, FusionVariant.CHANNEL_ONLY,
                  FusionVariant.PARALLEL_CS, FusionVariant.SEQ_SC}
_NEEDS_SPATIAL = {FusionVariant.CSAFM, FusionVariant.SPATIAL_ONLY,
                  FusionVariant.PARALLEL_CS, FusionVariant.SEQ_SC}


@dataclass
class ChannelAttnState:
    """Bottlenecked pointwise-conv pair over globally pooled features."""

    pw1: ConvParams
    pw2: ConvParams
    r1: int

    @classmethod
    def init(cls, c: int, r1: int, rng: Rng, dtype=np.float32) -> "ChannelAttnState":
        if r1 < 1 or c % r1 != 0:
            raise ConfigError(f"channel count {c} not divisible by reduction {r1}")
        mid = c // r1
        return cls(
            pw1=ConvParams.he_init(c, mid, 1, 1, 0, rng.spawn("pw1"), dtype=dtype),
            pw2=ConvParams.he_init(mid, c, 1, 1, 0, rng.spawn("pw2"), dtype=dtype),
            r1=r1,
        )

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("pw1.weight", self.pw1.weight), ("pw1.bias", self.pw1.bias),
                ("pw2.weight", self.pw2.weight), ("pw2.bias", self.pw2.bias)]


@dataclass
class SpatialAttnState:
    """Two 7x7 convolutions with batch norm, bottlenecked by r2."""

    conv1: ConvParams
    bn1: BnParams
    conv2: ConvParams
    bn2: BnParams
    r2: int

    @classmethod
    def init(cls, c: int, r2: int, rng: Rng, dtype=np.float32) -> "SpatialAttnState":
        if r2 < 1 or c % r2 != 0:
            raise ConfigError(f"channel count {c} not divisible by reduction {r2}")
        mid = c // r2
        return cls(
            conv1=ConvParams.he_init(c, mid, 7, 1, 3, rng.spawn("conv1"), dtype=dtype),
            bn1=BnParams.init(mid, dtype=dtype),
            conv2=ConvParams.he_init(mid, c, 7, 1, 3, rng.spawn("conv2"), dtype=dtype),
            bn2=BnParams.init(c, dtype=dtype),
            r2=r2,
        )

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("conv1.weight", self.conv1.weight), ("conv1.bias", self.conv1.bias),
                ("bn1.gamma", self.bn1.gamma), ("bn1.beta", self.bn1.beta),
                ("conv2.weight", self.conv2.weight), ("conv2.bias", self.conv2.bias),
                ("bn2.gamma", self.bn2.gamma), ("bn2.beta", self.bn2.beta)]


@dataclass
class FusionState:
    """Variant tag plus whichever attention parameters that variant uses."""

    variant: FusionVariant
    channel: Optional[ChannelAttnState] = None
    spatial: Optional[SpatialAttnState] = None
    literal_double_mul: bool = False

    @classmethod
    def init(
        cls,
        variant: FusionVariant,
        c: int,
        r1: int,
        r2: int,
        rng: Rng,
        literal_double_mul: bool = False,
        dtype=np.float32,
    ) -> "FusionState":
        ch = ChannelAttnState.init(c, r1, rng.spawn("channel"), dtype=dtype) \
            if variant in _NEEDS_CHANNEL else None
        sp = SpatialAttnState.init(c, r2, rng.spawn("spatial"), dtype=dtype) \
            if variant in _NEEDS_SPATIAL else None
        return cls(variant=variant, channel=ch, spatial=sp,
                   literal_double_mul=literal_double_mul)

    def parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        if self.channel is not None:
            out.extend((f"channel.{k}", t) for k, t in self.channel.parameters())
        if self.spatial is not None:
            out.extend((f"spatial.{k}", t) for k, t in self.spatial.parameters())
        return out


def center_crop(x: Tensor, h: int, w: int) -> Tensor:
    """Crop to h x w keeping the center; offsets are floor((extent - target)/2)."""
    if h > x.h or w > x.w or h < 1 or w < 1:
        raise DimensionError(f"cannot crop {x.dims} to {h}x{w}")
    if (h, w) == (x.h, x.w):
        return x
    oh = (x.h - h) // 2
    ow = (x.w - w) // 2
    out = np.ascontiguousarray(x.data[:, :, oh : oh + h, ow : ow + w])

    def bw(g: np.ndarray) -> None:
        dx = np.zeros_like(x.data)
        dx[:, :, oh : oh + h, ow : ow + w] = g
        accumulate_grad(x, dx)

    return make_node(out, (x,), bw)


def standardize(f_fp: Tensor, f_fv: Tensor) -> tuple[Tensor, Tensor]:
    """Center-crop both maps to their common minimum height and width."""
    if f_fp.n != f_fv.n or f_fp.c != f_fv.c:
        raise DimensionError(
            f"standardize needs matching batch/channels, got {f_fp.dims} vs {f_fv.dims}"
        )
    h = min(f_fp.h, f_fv.h)
    w = min(f_fp.w, f_fv.w)
    return center_crop(f_fp, h, w), center_crop(f_fv, h, w)


def ifi(f_fp: Tensor, f_fv: Tensor) -> Tensor:
    """Elementwise sum of the two standardized maps."""
    return ewise_add(f_fp, f_fv)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack along the channel axis: (n,C,h,w)+(n,C',h,w) -> (n,C+C',h,w)."""
    if a.n != b.n or a.h != b.h or a.w != b.w:
        raise DimensionError(f"cannot concat {a.dims} with {b.dims}")
    out = np.concatenate([a.data, b.data], axis=1)
    ca = a.c

    def bw(g: np.ndarray) -> None:
        accumulate_grad(a, g[:, :ca])
        accumulate_grad(b, g[:, ca:])

    return make_node(out, (a, b), bw)


def channel_attention_map(x: Tensor, s: ChannelAttnState) -> Tensor:
    """Raw (pre-multiplication) channel map: pw2(relu(pw1(gap(x)))), shape (n,C,1,1)."""
    if x.c != s.pw1.in_c:
        raise DimensionError(f"input has {x.c} channels, attention expects {s.pw1.in_c}")
    return pwconv(relu(pwconv(gap(x), s.pw1)), s.pw2)


def spatial_attention_map(x: Tensor, s: SpatialAttnState, mode: str) -> Tensor:
    """Spatial map sigma(bn(conv2(relu(bn(conv1(x)))))); values in (0,1)."""
    if x.c != s.conv1.in_c:
        raise DimensionError(f"input has {x.c} channels, attention expects {s.conv1.in_c}")
    y = batchnorm(conv2d(x, s.conv1), s.bn1, mode)
    y = batchnorm(conv2d(relu(y), s.conv2), s.bn2, mode)
    return sigmoid(y)


def _apply_channel(x: Tensor, s: ChannelAttnState, literal_double_mul: bool) -> Tensor:
    """F_c = A_c(x) * x, optionally times x again under the literal reading."""
    out = ewise_mul(x, channel_attention_map(x, s))
    if literal_double_mul:
        out = ewise_mul(out, x)
    return out


def _apply_spatial(x: Tensor, s: SpatialAttnState, mode: str,
                   literal_double_mul: bool) -> Tensor:
    """F_s = A_s(x) * x, optionally times x again under the literal reading."""
    out = ewise_mul(x, spatial_attention_map(x, s, mode))
    if literal_double_mul:
        out = ewise_mul(out, x)
    return out


def _soft_select(f_fp: Tensor, f_fv: Tensor, coeffs: list[Tensor]) -> Tensor:
    """Z = f_fp * prod(coeffs) + f_fv * prod(1 - coeffs)."""
    w1 = coeffs[0]
    w2 = one_minus(coeffs[0])
    for c in coeffs[1:]:
        w1 = ewise_mul(w1, c)
        w2 = ewise_mul(w2, one_minus(c))
    return ewise_add(ewise_mul(f_fp, w1), ewise_mul(f_fv, w2))


def csafm_fuse(
    f_fp: Tensor,
    f_fv: Tensor,
    ca: ChannelAttnState,
    sa: SpatialAttnState,
    mode: str,
    literal_double_mul: bool = False,
    return_parts: bool = False,
):
    """Channel-then-spatial attention fusion of two standardized maps.

    With return_parts=True also returns the intermediate maps
    {ifi, f_c, f_c_final, f_s, f_s_final} for inspection.
    """
    if f_fp.dims != f_fv.dims:
        raise DimensionError(f"fuse inputs differ: {f_fp.dims} vs {f_fv.dims}")
    x = ifi(f_fp, f_fv)
    f_c = _apply_channel(x, ca, literal_double_mul)
    f_c_final = sigmoid(f_c)
    f_s = _apply_spatial(f_c, sa, mode, literal_double_mul)
    f_s_final = sigmoid(f_s)
    z = _soft_select(f_fp, f_fv, [f_c_final, f_s_final])
    if return_parts:
        return z, {"ifi": x, "f_c": f_c, "f_c_final": f_c_final,
                   "f_s": f_s, "f_s_final": f_s_final}
    return z


def ablation_fuse(f_fp: Tensor, f_fv: Tensor, st: FusionState, mode: str) -> Tensor:
    """Dispatch on the configured variant; all paths share _soft_select."""
    v = st.variant
    if v is FusionVariant.SERIAL_SUM:
        return ifi(f_fp, f_fv)
    if v is FusionVariant.PARALLEL_CONCAT:
        return concat_channels(f_fp, f_fv)
    if f_fp.dims != f_fv.dims:
        raise DimensionError(f"fuse inputs differ: {f_fp.dims} vs {f_fv.dims}")
    if v is FusionVariant.CSAFM:
        return csafm_fuse(f_fp, f_fv, st.channel, st.spatial, mode,
                          literal_double_mul=st.literal_double_mul)
    x = ifi(f_fp, f_fv)
    ldm = st.literal_double_mul
    if v is FusionVariant.CHANNEL_ONLY:
        return _soft_select(f_fp, f_fv, [sigmoid(_apply_channel(x, st.channel, ldm))])
    if v is FusionVariant.SPATIAL_ONLY:
        return _soft_select(f_fp, f_fv, [sigmoid(_apply_spatial(x, st.spatial, mode, ldm))])
    if v is FusionVariant.PARALLEL_CS:
        fc = sigmoid(_apply_channel(x, st.channel, ldm))
        fs = sigmoid(_apply_spatial(x, st.spatial, mode, ldm))
        return _soft_select(f_fp, f_fv, [fc, fs])
    if v is FusionVariant.SEQ_SC:
        f_s = _apply_spatial(x, st.spatial, mode, ldm)
        f_s_final = sigmoid(f_s)
        f_c = _apply_channel(f_s, st.channel, ldm)
        f_c_final = sigmoid(f_c)
        return _soft_select(f_fp, f_fv, [f_s_final, f_c_final])
    raise ConfigError(f"unknown fusion variant {v!r}")
