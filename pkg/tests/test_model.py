import json
import struct

import numpy as np
import pytest

from csafm import (
    ConfigError,
    DimensionError,
    FpvCsafmModel,
    FusionVariant,
    Rng,
    Tensor,
    UnimodalClassifier,
    WeightFileMagicError,
    WeightFileShapeError,
    WeightFileStructureError,
    WeightFileTruncatedError,
    WeightFileVersionError,
    build_from_meta,
    check_gradients,
    ewise_add,
    ewise_mul,
    load,
    save,
)
from csafm import backbone as bb
from csafm import fusion as fu
from csafm import ops


def small_fused(variant=FusionVariant.CSAFM, seed=1, **kw):
    return FpvCsafmModel.build(
        classes=4, fp_size=(24, 24), fv_size=(20, 28), variant=variant,
        rng=Rng(seed), r1=4, r2=4, width_multiplier=0.125, **kw)


def batch_images(seed, n, fp_hw=(24, 24), fv_hw=(20, 28)):
    r = Rng(seed)
    fp = Tensor(r.normal(n * fp_hw[0] * fp_hw[1]).reshape(
        n, 1, *fp_hw).astype(np.float32))
    fv = Tensor(r.normal(n * fv_hw[0] * fv_hw[1]).reshape(
        n, 1, *fv_hw).astype(np.float32))
    return fp, fv


class TestFusedForward:
    def test_logit_shape(self):
        m = small_fused()
        fp, fv = batch_images(2, 3)
        y = m.forward_batch(fp, fv, "eval")
        assert y.dims == (3, 4, 1, 1)

    def test_eval_forward_deterministic(self):
        m = small_fused()
        fp, fv = batch_images(3, 2)
        y1 = m.forward_batch(fp, fv, "eval").data
        y2 = m.forward_batch(fp, fv, "eval").data
        assert np.array_equal(y1, y2)

    def test_batch_size_mismatch_rejected(self):
        m = small_fused()
        fp, _ = batch_images(4, 2)
        _, fv = batch_images(5, 3)
        with pytest.raises(DimensionError):
            m.forward_batch(fp, fv, "eval")

    def test_serial_sum_equals_manual_composition(self):
        m = small_fused(variant=FusionVariant.SERIAL_SUM)
        fp, fv = batch_images(6, 2)
        want = ops.fully_connected(
            ops.flatten(fu.ifi(*fu.standardize(
                bb.backbone_features(fp, m.fp_backbone, "eval"),
                bb.backbone_features(fv, m.fv_backbone, "eval")))),
            m.head_w, m.head_b).data
        got = m.forward_batch(fp, fv, "eval").data
        assert np.array_equal(got, want)

    def test_parallel_concat_head_doubles_input(self):
        m = small_fused(variant=FusionVariant.PARALLEL_CONCAT)
        plain = small_fused(variant=FusionVariant.CSAFM)
        assert m.head_w.dims[1] == 2 * plain.head_w.dims[1]
        fp, fv = batch_images(7, 2)
        assert m.forward_batch(fp, fv, "eval").dims == (2, 4, 1, 1)

    def test_every_variant_runs_both_modes(self):
        fp, fv = batch_images(8, 2)
        for v in FusionVariant:
            m = small_fused(variant=v, seed=9)
            for mode in ("train", "eval"):
                y = m.forward_batch(fp, fv, mode)
                assert y.dims == (2, 4, 1, 1), (v, mode)
                assert np.all(np.isfinite(y.data)), (v, mode)

    def test_wrong_image_size_raises_at_head(self):
        m = FpvCsafmModel.build(
            classes=3, fp_size=(96, 96), fv_size=(96, 96),
            variant=FusionVariant.SERIAL_SUM, rng=Rng(10),
            width_multiplier=0.125)
        fp, fv = batch_images(11, 1, fp_hw=(48, 48), fv_hw=(48, 48))
        with pytest.raises(DimensionError, match="drifted"):
            m.forward_batch(fp, fv, "eval")

    def test_too_few_classes_rejected(self):
        with pytest.raises(ConfigError):
            FpvCsafmModel.build(classes=1, fp_size=(24, 24), fv_size=(24, 24),
                                variant=FusionVariant.CSAFM, rng=Rng(0),
                                r1=4, r2=4, width_multiplier=0.125)

    def test_parameter_names_are_prefixed(self):
        m = small_fused()
        names = [n for n, _ in m.parameters()]
        assert any(n.startswith("fp.conv1") for n in names)
        assert any(n.startswith("fv.bn3") for n in names)
        assert any(n.startswith("fusion.channel") for n in names)
        assert any(n.startswith("fusion.spatial") for n in names)
        assert "head.weight" in names and "head.bias" in names


class TestUnimodal:
    def test_uses_only_its_modality(self):
        m = UnimodalClassifier.build(classes=4, image_size=(24, 24),
                                     modality="fp", rng=Rng(12),
                                     width_multiplier=0.125)
        fp, _ = batch_images(13, 2)
        other1 = Tensor(np.zeros((2, 1, 20, 28), dtype=np.float32))
        other2 = Tensor(np.ones((2, 1, 20, 28), dtype=np.float32))
        y1 = m.forward_batch(fp, other1, "eval").data
        y2 = m.forward_batch(fp, other2, "eval").data
        assert np.array_equal(y1, y2)

    def test_bad_modality_rejected(self):
        with pytest.raises(ConfigError):
            UnimodalClassifier.build(classes=4, image_size=(24, 24),
                                     modality="iris", rng=Rng(0))

    def test_meta_describes_model(self):
        m = UnimodalClassifier.build(classes=5, image_size=(20, 28),
                                     modality="fv", rng=Rng(14),
                                     width_multiplier=0.25)
        meta = m.meta()
        assert meta["kind"] == "unimodal"
        assert meta["modality"] == "fv"
        assert meta["classes"] == 5
        assert meta["image_size"] == [20, 28]


class TestEndToEndGradcheck:
    def test_tiny_fused_model(self):
        """f64 model on 20x20 pairs; probes one tensor from each block."""
        m = FpvCsafmModel.build(
            classes=3, fp_size=(20, 20), fv_size=(20, 20),
            variant=FusionVariant.CSAFM, rng=Rng(15), r1=4, r2=4,
            width_multiplier=1 / 16, dtype=np.float64)
        r = Rng(16)
        fp = Tensor(r.normal(2 * 400).reshape(2, 1, 20, 20).astype(np.float64))
        fv = Tensor(r.normal(2 * 400).reshape(2, 1, 20, 20).astype(np.float64))
        labels = np.array([0, 2])

        def loss():
            return ops.softmax_xent(m.forward_batch(fp, fv, "train"), labels)[0]

        wanted = ("fp.conv1.weight", "fv.conv3.weight", "fusion.channel.pw2.weight",
                  "fusion.spatial.conv1.weight", "head.weight")
        probe = [(n, t) for n, t in m.parameters() if n in wanted]
        assert len(probe) == len(wanted)
        errs = check_gradients(loss, probe, sample=5, seed=17)
        for name, e in errs.items():
            assert e < 1e-5, f"{name}: {e}"


class TestSerialization:
    def test_round_trip_state_and_logits(self, tmp_path):
        m = small_fused(seed=18)
        # give running stats non-default values so the test sees them travel
        fp, fv = batch_images(19, 4)
        m.forward_batch(fp, fv, "train")
        path = tmp_path / "w.csafm"
        save(m, path)
        back = load(path)
        a = {n: (arr.copy(), k) for n, arr, k in m.state_entries()}
        b = {n: (arr, k) for n, arr, k in back.state_entries()}
        assert set(a) == set(b)
        for n in a:
            assert a[n][1] == b[n][1]
            assert np.array_equal(a[n][0], b[n][0]), n
        y1 = m.forward_batch(fp, fv, "eval").data
        y2 = back.forward_batch(fp, fv, "eval").data
        assert np.array_equal(y1, y2)

    def test_unimodal_round_trip(self, tmp_path):
        m = UnimodalClassifier.build(classes=4, image_size=(24, 24),
                                     modality="fp", rng=Rng(20),
                                     width_multiplier=0.125)
        path = tmp_path / "u.csafm"
        save(m, path)
        back = load(path)
        assert isinstance(back, UnimodalClassifier)
        assert back.modality == "fp"
        fp, fv = batch_images(21, 2)
        assert np.array_equal(m.forward_batch(fp, fv, "eval").data,
                              back.forward_batch(fp, fv, "eval").data)

    def test_bad_magic(self, tmp_path):
        m = small_fused()
        path = tmp_path / "w.csafm"
        save(m, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"ZIPF"
        path.write_bytes(bytes(raw))
        with pytest.raises(WeightFileMagicError):
            load(path)

    def test_unsupported_version(self, tmp_path):
        m = small_fused()
        path = tmp_path / "w.csafm"
        save(m, path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(raw))
        with pytest.raises(WeightFileVersionError):
            load(path)

    def test_truncated_file(self, tmp_path):
        m = small_fused()
        path = tmp_path / "w.csafm"
        save(m, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 17])
        with pytest.raises(WeightFileTruncatedError):
            load(path)
        path.write_bytes(raw[:2])
        with pytest.raises(WeightFileTruncatedError):
            load(path)

    def test_header_shape_lie_detected(self, tmp_path):
        m = small_fused()
        path = tmp_path / "w.csafm"
        save(m, path)
        raw = path.read_bytes()
        hlen = struct.unpack_from("<I", raw, 8)[0]
        header = json.loads(raw[12 : 12 + hlen])
        header["tensors"][0]["dims"][0] += 1
        hb = json.dumps(header, sort_keys=True).encode()
        path.write_bytes(raw[:4] + struct.pack("<II", 1, len(hb)) + hb
                         + raw[12 + hlen :])
        with pytest.raises(WeightFileShapeError):
            load(path)

    def test_trailing_garbage_detected(self, tmp_path):
        m = small_fused()
        path = tmp_path / "w.csafm"
        save(m, path)
        path.write_bytes(path.read_bytes() + b"\x00\x01\x02")
        with pytest.raises(WeightFileStructureError):
            load(path)

    def test_header_json_garbage_detected(self, tmp_path):
        m = small_fused()
        path = tmp_path / "w.csafm"
        save(m, path)
        raw = bytearray(path.read_bytes())
        raw[12] = ord("#")  # first header byte: JSON can no longer parse
        path.write_bytes(bytes(raw))
        with pytest.raises(WeightFileStructureError):
            load(path)

    def test_build_from_meta_round_trip(self):
        m = small_fused(variant=FusionVariant.PARALLEL_CS, seed=22)
        again = build_from_meta(m.meta(), Rng(23))
        assert isinstance(again, FpvCsafmModel)
        assert [n for n, _, _ in again.state_entries()] \
            == [n for n, _, _ in m.state_entries()]
        assert again.meta() == m.meta()

    def test_unknown_kind_rejected(self):
        with pytest.raises(WeightFileStructureError):
            build_from_meta({"kind": "transformer"}, Rng(0))
