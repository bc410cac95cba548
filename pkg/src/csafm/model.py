"""Full two-branch model, its unimodal counterpart, and weight files.

Weight file layout, exact to the byte:

    magic   4 bytes  b"CSAF"
    version u32 LE   1
    hlen    u32 LE   byte length of the JSON header
    header  hlen bytes, UTF-8 JSON:
            {"meta": {...build settings...},
             "tensors": [{"name", "dims", "kind"}...]}  kind: param | running_stat
    blobs   one per header entry, in order: four u32 LE dims then
            row-major little-endian float32 data

Running statistics are stored as (1,c,1,1) blobs. load() rebuilds the
model from "meta", then fills every tensor in header order, so a round
trip is bitwise exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Union

import numpy as np

from .backbone import BackboneState, backbone_classify, backbone_features, feature_shape
from .errors import (
    ConfigError,
    DimensionError,
    WeightFileMagicError,
    WeightFileShapeError,
    WeightFileStructureError,
    WeightFileTruncatedError,
    WeightFileVersionError,
)
from .fusion import FusionState, FusionVariant, ablation_fuse, standardize
from .ops import flatten, fully_connected
from .tensor import Rng, Tensor, tensor_from_blob, tensor_to_blob

MAGIC = b"CSAF"
VERSION = 1


def _he_fc(d_in: int, d_out: int, rng: Rng, dtype) -> tuple[Tensor, Tensor]:
    std = float(np.sqrt(2.0 / d_in))
    w = rng.normal(d_out * d_in, 0.0, std).astype(dtype).reshape(d_out, d_in, 1, 1)
    return (Tensor(w, requires_grad=True),
            Tensor(np.zeros((1, d_out, 1, 1), dtype=dtype), requires_grad=True))


def _bn_entries(prefix: str, bn) -> list[tuple[str, np.ndarray, str]]:
    return [(f"{prefix}.running_mean", bn.running_mean, "running_stat"),
            (f"{prefix}.running_var", bn.running_var, "running_stat")]


def _backbone_entries(prefix: str, s: BackboneState) -> list[tuple[str, np.ndarray, str]]:
    out: list[tuple[str, np.ndarray, str]] = []
    for i, (cv, bn) in enumerate(zip(s.convs, s.bns)):
        out.append((f"{prefix}.conv{i + 1}.weight", cv.weight.data, "param"))
        out.append((f"{prefix}.conv{i + 1}.bias", cv.bias.data, "param"))
        out.append((f"{prefix}.bn{i + 1}.gamma", bn.gamma.data, "param"))
        out.append((f"{prefix}.bn{i + 1}.beta", bn.beta.data, "param"))
        out.extend(_bn_entries(f"{prefix}.bn{i + 1}", bn))
    if s.head_w is not None:
        out.append((f"{prefix}.head.weight", s.head_w.data, "param"))
        out.append((f"{prefix}.head.bias", s.head_b.data, "param"))
    return out


def _fusion_entries(prefix: str, st: FusionState) -> list[tuple[str, np.ndarray, str]]:
    out: list[tuple[str, np.ndarray, str]] = []
    if st.channel is not None:
        for k, t in st.channel.parameters():
            out.append((f"{prefix}.channel.{k}", t.data, "param"))
    if st.spatial is not None:
        sp = st.spatial
        out.append((f"{prefix}.spatial.conv1.weight", sp.conv1.weight.data, "param"))
        out.append((f"{prefix}.spatial.conv1.bias", sp.conv1.bias.data, "param"))
        out.append((f"{prefix}.spatial.bn1.gamma", sp.bn1.gamma.data, "param"))
        out.append((f"{prefix}.spatial.bn1.beta", sp.bn1.beta.data, "param"))
        out.extend(_bn_entries(f"{prefix}.spatial.bn1", sp.bn1))
        out.append((f"{prefix}.spatial.conv2.weight", sp.conv2.weight.data, "param"))
        out.append((f"{prefix}.spatial.conv2.bias", sp.conv2.bias.data, "param"))
        out.append((f"{prefix}.spatial.bn2.gamma", sp.bn2.gamma.data, "param"))
        out.append((f"{prefix}.spatial.bn2.beta", sp.bn2.beta.data, "param"))
        out.extend(_bn_entries(f"{prefix}.spatial.bn2", sp.bn2))
    return out


@dataclass
class FpvCsafmModel:
    """Two backbones, a fusion block, and a flatten+FC classifier head."""

    fp_backbone: BackboneState
    fv_backbone: BackboneState
    fusion: FusionState
    head_w: Tensor
    head_b: Tensor
    classes: int
    fp_size: tuple[int, int]
    fv_size: tuple[int, int]
    r1: int
    r2: int
    width_multiplier: float

    @classmethod
    def build(
        cls,
        classes: int,
        fp_size: tuple[int, int],
        fv_size: tuple[int, int],
        variant: FusionVariant,
        rng: Rng,
        r1: int = 16,
        r2: int = 16,
        width_multiplier: float = 1.0,
        literal_double_mul: bool = False,
        dtype=np.float32,
    ) -> "FpvCsafmModel":
        if classes < 2:
            raise ConfigError(f"need at least 2 classes, got {classes}")
        fp_bb = BackboneState.init(rng.spawn("fp"), width_multiplier, dtype=dtype)
        fv_bb = BackboneState.init(rng.spawn("fv"), width_multiplier, dtype=dtype)
        c, h1, w1 = feature_shape(fp_size[0], fp_size[1], width_multiplier)
        _, h2, w2 = feature_shape(fv_size[0], fv_size[1], width_multiplier)
        fh, fw = min(h1, h2), min(w1, w2)
        fusion = FusionState.init(variant, c, r1, r2, rng.spawn("fusion"),
                                  literal_double_mul=literal_double_mul, dtype=dtype)
        head_c = 2 * c if variant is FusionVariant.PARALLEL_CONCAT else c
        head_w, head_b = _he_fc(head_c * fh * fw, classes, rng.spawn("head"), dtype)
        return cls(fp_backbone=fp_bb, fv_backbone=fv_bb, fusion=fusion,
                   head_w=head_w, head_b=head_b, classes=classes,
                   fp_size=tuple(fp_size), fv_size=tuple(fv_size),
                   r1=r1, r2=r2, width_multiplier=width_multiplier)

    def forward_batch(self, fp_img: Tensor, fv_img: Tensor, mode: str) -> Tensor:
        if fp_img.n != fv_img.n:
            raise DimensionError(
                f"batch sizes differ: {fp_img.n} vs {fv_img.n}"
            )
        a = backbone_features(fp_img, self.fp_backbone, mode)
        b = backbone_features(fv_img, self.fv_backbone, mode)
        a, b = standardize(a, b)
        z = ablation_fuse(a, b, self.fusion, mode)
        flat = flatten(z)
        if flat.c != self.head_w.dims[1]:
            raise DimensionError(
                f"fused features flatten to {flat.c}, head expects "
                f"{self.head_w.dims[1]}; image sizes drifted from build time"
            )
        return fully_connected(flat, self.head_w, self.head_b)

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = [(f"fp.{k}", t) for k, t in self.fp_backbone.parameters()]
        out += [(f"fv.{k}", t) for k, t in self.fv_backbone.parameters()]
        out += [(f"fusion.{k}", t) for k, t in self.fusion.parameters()]
        out += [("head.weight", self.head_w), ("head.bias", self.head_b)]
        return out

    def state_entries(self) -> list[tuple[str, np.ndarray, str]]:
        out = _backbone_entries("fp", self.fp_backbone)
        out += _backbone_entries("fv", self.fv_backbone)
        out += _fusion_entries("fusion", self.fusion)
        out.append(("head.weight", self.head_w.data, "param"))
        out.append(("head.bias", self.head_b.data, "param"))
        return out

    def meta(self) -> dict:
        return {
            "kind": "fused",
            "classes": self.classes,
            "variant": self.fusion.variant.name,
            "r1": self.r1,
            "r2": self.r2,
            "width_multiplier": self.width_multiplier,
            "literal_double_mul": self.fusion.literal_double_mul,
            "fp_size": list(self.fp_size),
            "fv_size": list(self.fv_size),
        }


@dataclass
class UnimodalClassifier:
    """Single backbone with a classifier head, for one-modality baselines."""

    backbone: BackboneState
    classes: int
    image_size: tuple[int, int]
    modality: str
    width_multiplier: float

    @classmethod
    def build(
        cls,
        classes: int,
        image_size: tuple[int, int],
        modality: str,
        rng: Rng,
        width_multiplier: float = 1.0,
        dtype=np.float32,
    ) -> "UnimodalClassifier":
        if modality not in ("fp", "fv"):
            raise ConfigError(f"modality must be 'fp' or 'fv', got {modality!r}")
        bb = BackboneState.init(rng.spawn(modality), width_multiplier,
                                classes=classes, image_hw=tuple(image_size), dtype=dtype)
        return cls(backbone=bb, classes=classes, image_size=tuple(image_size),
                   modality=modality, width_multiplier=width_multiplier)

    def forward_batch(self, fp_img: Tensor, fv_img: Tensor, mode: str) -> Tensor:
        img = fp_img if self.modality == "fp" else fv_img
        return backbone_classify(img, self.backbone, self.classes, mode)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{self.modality}.{k}", t) for k, t in self.backbone.parameters()]

    def state_entries(self) -> list[tuple[str, np.ndarray, str]]:
        return _backbone_entries(self.modality, self.backbone)

    def meta(self) -> dict:
        return {
            "kind": "unimodal",
            "classes": self.classes,
            "modality": self.modality,
            "width_multiplier": self.width_multiplier,
            "image_size": list(self.image_size),
        }


AnyModel = Union[FpvCsafmModel, UnimodalClassifier]


def build_from_meta(meta: dict, rng: Rng) -> AnyModel:
    kind = meta.get("kind")
    if kind == "fused":
        return FpvCsafmModel.build(
            classes=meta["classes"],
            fp_size=tuple(meta["fp_size"]),
            fv_size=tuple(meta["fv_size"]),
            variant=FusionVariant.from_tag(meta["variant"]),
            rng=rng,
            r1=meta["r1"],
            r2=meta["r2"],
            width_multiplier=meta["width_multiplier"],
            literal_double_mul=meta["literal_double_mul"],
        )
    if kind == "unimodal":
        return UnimodalClassifier.build(
            classes=meta["classes"],
            image_size=tuple(meta["image_size"]),
            modality=meta["modality"],
            rng=rng,
            width_multiplier=meta["width_multiplier"],
        )
    raise WeightFileStructureError(f"unknown model kind {kind!r} in header")


def _stat_blob(arr: np.ndarray) -> bytes:
    return tensor_to_blob(Tensor(arr.reshape(1, arr.size, 1, 1)))


def save(m: AnyModel, path) -> None:
    entries = m.state_entries()
    header = {
        "meta": m.meta(),
        "tensors": [
            {
                "name": name,
                "dims": list(arr.shape) if kind == "param" else [1, arr.size, 1, 1],
                "kind": kind,
            }
            for name, arr, kind in entries
        ],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(hbytes)))
        fh.write(hbytes)
        for name, arr, kind in entries:
            if kind == "param":
                fh.write(tensor_to_blob(Tensor(arr)))
            else:
                fh.write(_stat_blob(arr))


def load(path) -> AnyModel:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4:
        raise WeightFileTruncatedError(f"{path}: file shorter than magic")
    if buf[:4] != MAGIC:
        raise WeightFileMagicError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < 12:
        raise WeightFileTruncatedError(f"{path}: missing version/header length")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise WeightFileVersionError(f"{path}: version {version}, expected {VERSION}")
    if len(buf) < 12 + hlen:
        raise WeightFileTruncatedError(f"{path}: header truncated")
    try:
        header = json.loads(buf[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise WeightFileStructureError(f"{path}: header not valid JSON: {e}") from None
    if not isinstance(header, dict) or "meta" not in header or "tensors" not in header:
        raise WeightFileStructureError(f"{path}: header missing meta/tensors")

    model = build_from_meta(header["meta"], Rng(0))
    entries = model.state_entries()
    declared = header["tensors"]
    if len(declared) != len(entries):
        raise WeightFileStructureError(
            f"{path}: header declares {len(declared)} tensors, model has {len(entries)}"
        )

    offset = 12 + hlen
    for decl, (name, arr, kind) in zip(declared, entries):
        if not isinstance(decl, dict) or not {"name", "dims", "kind"} <= set(decl):
            raise WeightFileStructureError(f"{path}: malformed tensor entry {decl!r}")
        if decl["name"] != name or decl["kind"] != kind:
            raise WeightFileStructureError(
                f"{path}: tensor entry {decl['name']!r}/{decl['kind']!r} where "
                f"{name!r}/{kind!r} expected"
            )
        want = list(arr.shape) if kind == "param" else [1, arr.size, 1, 1]
        if list(decl["dims"]) != want:
            raise WeightFileShapeError(
                f"{path}: {name} declared dims {decl['dims']}, expected {want}"
            )
        t, offset = tensor_from_blob(buf, offset)
        if list(t.dims) != want:
            raise WeightFileShapeError(
                f"{path}: {name} blob dims {list(t.dims)}, header says {want}"
            )
        arr[...] = t.data.reshape(arr.shape)
    if offset != len(buf):
        raise WeightFileStructureError(
            f"{path}: {len(buf) - offset} unexpected trailing bytes"
        )
    return model
