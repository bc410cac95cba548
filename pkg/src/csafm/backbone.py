"""Five-stage CNN branch mapping one grayscale image to a 512-channel map.

Stage layout: conv -> batchnorm -> relu -> 3x3 stride-2 maxpool, five
times. Stage 1 uses a 7x7 stride-2 kernel; the rest are 3x3 stride 1.
Paddings are 3 for the 7x7 conv, 1 for the 3x3 convs, and 1 for every
pool, so each stride-2 stage maps an extent s to ceil(s/2).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DimensionError
from .ops import BnParams, ConvParams, batchnorm, conv2d, conv_out_size, flatten, fully_connected, maxpool2d, relu
from .tensor import Rng, Tensor

BASE_CHANNELS = (64, 128, 256, 512, 512)
KERNELS = (7, 3, 3, 3, 3)
CONV_STRIDES = (2, 1, 1, 1, 1)
CONV_PADS = (3, 1, 1, 1, 1)
POOL_K, POOL_S, POOL_P = 3, 2, 1


def scaled_channels(width_multiplier: float = 1.0) -> tuple[int, ...]:
    """Channel counts after the test-only width multiplier (min 1 each)."""
    if width_multiplier <= 0:
        raise ConfigError(f"width_multiplier must be positive, got {width_multiplier}")
    return tuple(max(1, round(c * width_multiplier)) for c in BASE_CHANNELS)


def feature_shape(h: int, w: int, width_multiplier: float = 1.0) -> tuple[int, int, int]:
    """(channels, h', w') after all five stages; errors name the first stage to underflow."""
    ch = scaled_channels(width_multiplier)
    for i in range(5):
        nh = conv_out_size(h, KERNELS[i], CONV_STRIDES[i], CONV_PADS[i])
        nw = conv_out_size(w, KERNELS[i], CONV_STRIDES[i], CONV_PADS[i])
        if nh < 1 or nw < 1:
            raise DimensionError(
                f"input too small: conv stage {i + 1} would produce {nh}x{nw}"
            )
        h, w = nh, nw
        nh = conv_out_size(h, POOL_K, POOL_S, POOL_P)
        nw = conv_out_size(w, POOL_K, POOL_S, POOL_P)
        if nh < 1 or nw < 1:
            raise DimensionError(
                f"input too small: pool stage {i + 1} would produce {nh}x{nw}"
            )
        h, w = nh, nw
    return ch[-1], h, w


@dataclass
class BackboneState:
    """Parameters of the five conv/bn stages plus an optional classifier head."""

    convs: list[ConvParams]
    bns: list[BnParams]
    head_w: Optional[Tensor] = None
    head_b: Optional[Tensor] = None
    classes: Optional[int] = None
    width_multiplier: float = 1.0

    @classmethod
    def init(
        cls,
        rng: Rng,
        width_multiplier: float = 1.0,
        classes: Optional[int] = None,
        image_hw: Optional[tuple[int, int]] = None,
        dtype=np.float32,
    ) -> "BackboneState":
        ch = scaled_channels(width_multiplier)
        convs, bns = [], []
        in_c = 1
        for i in range(5):
            convs.append(ConvParams.he_init(
                in_c, ch[i], KERNELS[i], CONV_STRIDES[i], CONV_PADS[i],
                rng.spawn("conv", i), dtype=dtype))
            bns.append(BnParams.init(ch[i], dtype=dtype))
            in_c = ch[i]
        s = cls(convs=convs, bns=bns, width_multiplier=width_multiplier)
        if classes is not None:
            if image_hw is None:
                raise ConfigError("classifier head needs image_hw to size its input")
            c, fh, fw = feature_shape(image_hw[0], image_hw[1], width_multiplier)
            d = c * fh * fw
            # He-normal on the fan-in of the flattened feature vector
            std = float(np.sqrt(2.0 / d))
            wdat = rng.spawn("head").normal(classes * d, 0.0, std).astype(dtype)
            s.head_w = Tensor(wdat.reshape(classes, d, 1, 1), requires_grad=True)
            s.head_b = Tensor(np.zeros((1, classes, 1, 1), dtype=dtype), requires_grad=True)
            s.classes = classes
        return s

    def parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for i, (cv, bn) in enumerate(zip(self.convs, self.bns)):
            out.append((f"conv{i + 1}.weight", cv.weight))
            out.append((f"conv{i + 1}.bias", cv.bias))
            out.append((f"bn{i + 1}.gamma", bn.gamma))
            out.append((f"bn{i + 1}.beta", bn.beta))
        if self.head_w is not None:
            out.append(("head.weight", self.head_w))
            out.append(("head.bias", self.head_b))
        return out


def backbone_features(img: Tensor, s: BackboneState, mode: str) -> Tensor:
    """Run the five stages; output (n, C, h', w') per feature_shape."""
    if img.c != 1:
        raise DimensionError(f"expected 1-channel input, got {img.c}")
    x = img
    for i in range(5):
        x = conv2d(x, s.convs[i])
        x = batchnorm(x, s.bns[i], mode)
        x = relu(x)
        x = maxpool2d(x, POOL_K, POOL_S, POOL_P)
    return x


def backbone_classify(img: Tensor, s: BackboneState, classes: int, mode: str) -> Tensor:
    """Features -> flatten -> fully connected logits (n, classes, 1, 1)."""
    if s.head_w is None:
        raise ConfigError("backbone has no classifier head")
    if classes != s.classes:
        raise ConfigError(f"head was built for {s.classes} classes, asked for {classes}")
    f = backbone_features(img, s, mode)
    return fully_connected(flatten(f), s.head_w, s.head_b)
