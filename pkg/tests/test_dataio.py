import numpy as np
import pytest
import torch

from mritranslate.dataio import (
    DatasetManifest,
    PairedSample,
    PairedSlabs,
    Slab25D,
    VolumeRecord,
    build_slab,
    default_center,
    discover_volumes,
    normalize_slice,
    preprocess_volumes,
    resize_bilinear,
    split_dataset,
    to_model_space,
    to_uint8,
)
from mritranslate.errors import DataError
from mritranslate.nifti import read_volume, write_volume

from conftest import write_patient
from oracles import ref_normalize_slice, ref_resize_bilinear, ref_slab_channel


class TestNormalizeSlice:
    def test_linear_map_endpoints_and_midpoint(self):
        out = normalize_slice(np.array([[0.0, 2.0, 4.0]]))
        assert out.tolist() == [[0, 128, 255]]

    def test_uniform_slice_maps_to_zeros(self):
        out = normalize_slice(np.full((4, 4), 7.0))
        assert out.dtype == np.uint8
        assert not out.any()

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            raw = rng.uniform(-50.0, 900.0, size=(16, 16))
            got = normalize_slice(raw)
            assert got.min() == 0 and got.max() == 255
            np.testing.assert_array_equal(got, ref_normalize_slice(raw))

    def test_rejects_non_finite(self):
        raw = np.ones((3, 3))
        raw[1, 1] = np.nan
        with pytest.raises(DataError, match="slice-7"):
            normalize_slice(raw, name="slice-7")

    def test_idempotent_on_normalized_output(self):
        rng = np.random.default_rng(5)
        raw = rng.uniform(0.0, 100.0, size=(12, 12))
        once = normalize_slice(raw)
        twice = normalize_slice(once.astype(np.float64))
        np.testing.assert_array_equal(once, twice)


class TestResize:
    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(11)
        img = rng.uniform(0.0, 255.0, size=(13, 9))
        for out_h, out_w in ((7, 7), (26, 18), (32, 32)):
            np.testing.assert_array_equal(
                resize_bilinear(img, out_h, out_w),
                ref_resize_bilinear(img, out_h, out_w),
            )

    def test_identity_at_same_size(self):
        img = np.arange(12.0).reshape(3, 4)
        np.testing.assert_array_equal(resize_bilinear(img, 3, 4), img)


class TestDefaultCenter:
    @pytest.mark.parametrize("nz,expected", [(155, 77), (4, 2), (3, 1)])
    def test_values(self, nz, expected):
        assert default_center(nz) == expected

    def test_too_thin_rejected(self):
        with pytest.raises(DataError):
            default_center(2)


class TestBuildSlab:
    def _record(self, tmp_path, volume):
        path = tmp_path / "case_t1.nii"
        write_volume(path, volume)
        return VolumeRecord(
            patient_id="case", modality="T1", path=path, shape=volume.shape
        )

    def test_channels_trace_consecutive_slices_bit_exact(self, tmp_path):
        # slice k is constant k*10 with one perturbed pixel so each slice is
        # distinguishable and non-uniform
        nz = 5
        volume = np.zeros((10, 12, nz))
        for k in range(nz):
            volume[:, :, k] = k * 10.0
            volume[3, 4, k] = k * 10.0 + 5.0
        rec = self._record(tmp_path, volume)
        z = 2
        slab = build_slab(rec, z, size=32)
        for c, offset in enumerate((-1, 0, 1)):
            expected = ref_slab_channel(volume[:, :, z + offset], size=32)
            np.testing.assert_array_equal(slab.pixels[:, :, c], expected)

    def test_only_admissible_center_for_three_slices(self, tmp_path):
        volume = np.zeros((6, 6, 3))
        for k in range(3):
            volume[:, :, k] = k
            volume[0, 0, k] = k + 9.0
        rec = self._record(tmp_path, volume)
        slab = build_slab(rec, 1, size=16)
        assert slab.z_center == 1
        assert slab.pixels.shape == (16, 16, 3)

    @pytest.mark.parametrize("z", [0, 4, -1])
    def test_out_of_range_center_rejected(self, tmp_path, z):
        volume = np.random.default_rng(0).uniform(size=(6, 6, 5))
        rec = self._record(tmp_path, volume)
        with pytest.raises(IndexError):
            build_slab(rec, z)

    def test_uniform_slice_gives_zero_channel(self, tmp_path):
        volume = np.random.default_rng(1).uniform(1.0, 2.0, size=(8, 8, 3))
        volume[:, :, 0] = 42.0
        rec = self._record(tmp_path, volume)
        slab = build_slab(rec, 1, size=16)
        assert not slab.pixels[:, :, 0].any()
        assert slab.pixels[:, :, 1].any()

    def test_slab_default_size_is_512(self, tmp_path):
        volume = np.random.default_rng(2).uniform(size=(6, 6, 3))
        rec = self._record(tmp_path, volume)
        assert build_slab(rec, 1).pixels.shape == (512, 512, 3)


class TestSplit:
    def test_ratio_80_20(self):
        ids = [f"s{i}" for i in range(10)]
        m = split_dataset(ids, 0.8, seed=1)
        assert len(m.train_ids) == 8 and len(m.test_ids) == 2

    def test_deterministic_given_seed(self):
        ids = [f"s{i}" for i in range(25)]
        a = split_dataset(ids, 0.8, seed=9, few_shot_cap=10)
        b = split_dataset(ids, 0.8, seed=9, few_shot_cap=10)
        assert a.to_text() == b.to_text()
        c = split_dataset(ids, 0.8, seed=10, few_shot_cap=10)
        assert a.to_text() != c.to_text()

    def test_few_shot_cap_truncates_train_only(self):
        ids = [f"s{i}" for i in range(400)]
        m = split_dataset(ids, 0.8, seed=0, few_shot_cap=300)
        assert len(m.train_ids) == 300
        assert len(m.test_ids) == 80

    def test_disjoint_membership(self):
        ids = [f"s{i}" for i in range(31)]
        m = split_dataset(ids, 0.7, seed=3)
        assert not set(m.train_ids) & set(m.test_ids)
        assert sorted(m.train_ids + m.test_ids) == sorted(ids)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            split_dataset([], 0.8, seed=0)

    @pytest.mark.parametrize("ratio", [0.0, 1.0, -0.1, 1.5])
    def test_ratio_bounds(self, ratio):
        with pytest.raises(ValueError):
            split_dataset(["a", "b"], ratio, seed=0)

    def test_manifest_roundtrip(self, tmp_path):
        m = split_dataset([f"s{i}" for i in range(9)], 0.75, seed=4, few_shot_cap=5)
        path = tmp_path / "manifest.txt"
        m.write(path)
        back = DatasetManifest.read(path)
        assert back == m
        assert back.to_text() == m.to_text()


class TestPairing:
    def _slab(self, pid="p1", modality="T1", z=3):
        return Slab25D(
            pixels=np.zeros((8, 8, 3), dtype=np.uint8),
            patient_id=pid,
            modality=modality,
            z_center=z,
        )

    def test_matching_pair_ok(self):
        pair = PairedSample(self._slab(modality="T1"), self._slab(modality="T2"))
        assert pair.task == ("T1", "T2")

    def test_patient_mismatch_rejected(self):
        with pytest.raises(DataError):
            PairedSample(self._slab(pid="a"), self._slab(pid="b"))

    def test_z_mismatch_rejected(self):
        with pytest.raises(DataError):
            PairedSample(self._slab(z=3), self._slab(z=4))


class TestModelSpace:
    def test_endpoints(self):
        pix = np.zeros((2, 2, 3), dtype=np.uint8)
        pix[0, 0] = 255
        t = to_model_space(pix)
        assert t[..., 0, 0].min().item() == pytest.approx(1.0)
        assert t[..., 1, 1].min().item() == pytest.approx(-1.0)

    def test_midpoint_value(self):
        pix = np.full((1, 1, 3), 128, dtype=np.uint8)
        t = to_model_space(pix)
        assert t[0, 0, 0].item() == pytest.approx(128.0 / 127.5 - 1.0, abs=1e-7)

    def test_roundtrip_exact(self):
        rng = np.random.default_rng(8)
        pix = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
        back = to_uint8(to_model_space(pix))
        np.testing.assert_array_equal(back, pix)


class TestLoader:
    def test_batch_shape_and_layout(self, slab_tree):
        manifest = DatasetManifest.read(slab_tree / "manifest.txt")
        pairs = PairedSlabs(slab_tree, manifest, ("T1", "T2"), "train", 256)
        src, tgt = pairs.batch([0, 1])
        assert src.shape == (2, 3, 256, 256)
        assert tgt.shape == (2, 3, 256, 256)
        assert src.dtype == torch.float32

    def test_roundtrip_matches_loaded_resolution(self, slab_tree):
        manifest = DatasetManifest.read(slab_tree / "manifest.txt")
        pairs = PairedSlabs(slab_tree, manifest, ("T1", "T2"), "test", 128)
        src_u8, _ = pairs.load_pair_uint8(pairs.ids[0])
        tensor = to_model_space(src_u8)
        np.testing.assert_array_equal(to_uint8(tensor), src_u8)

    def test_missing_file_names_sample(self, slab_tree):
        manifest = DatasetManifest.read(slab_tree / "manifest.txt")
        bad = DatasetManifest(
            train_ids=["ghost"],
            test_ids=list(manifest.test_ids),
            split_ratio=0.8,
            rng_seed=0,
        )
        pairs = PairedSlabs(slab_tree, bad, ("T1", "T2"), "train", 128)
        with pytest.raises(DataError, match="ghost"):
            pairs.load_pair_uint8("ghost")

    def test_unsupported_resolution_rejected(self, slab_tree):
        manifest = DatasetManifest.read(slab_tree / "manifest.txt")
        with pytest.raises(ValueError):
            PairedSlabs(slab_tree, manifest, ("T1", "T2"), "train", 200)


class TestDiscoveryAndPreprocess:
    def test_discovery_tags_modalities(self, tmp_path):
        write_patient(tmp_path / "v", "caseA", ("T1", "T2", "FLAIR"), seed=1)
        records, anomalies = discover_volumes(tmp_path / "v")
        assert not anomalies
        assert {(r.patient_id, r.modality) for r in records} == {
            ("caseA", "T1"),
            ("caseA", "T2"),
            ("caseA", "FLAIR"),
        }

    def test_preprocess_writes_tree_and_logs(self, tmp_path):
        volumes = tmp_path / "v"
        for i in range(5):
            write_patient(volumes, f"p{i}", seed=i)
        result = preprocess_volumes(volumes, tmp_path / "out", ratio=0.8, seed=2)
        assert len(result.manifest.train_ids) == 4
        assert len(result.manifest.test_ids) == 1
        for split in ("train", "test"):
            for pid in result.manifest.ids(split):
                for mod in ("T1", "T2"):
                    assert (tmp_path / "out" / split / f"{pid}_{mod}.png").is_file()
        assert (tmp_path / "out" / "anomalies.log").exists()

    def test_preprocess_deterministic(self, tmp_path):
        volumes = tmp_path / "v"
        for i in range(5):
            write_patient(volumes, f"p{i}", seed=i)
        a = preprocess_volumes(volumes, tmp_path / "a", ratio=0.8, seed=3)
        b = preprocess_volumes(volumes, tmp_path / "b", ratio=0.8, seed=3)
        assert (tmp_path / "a" / "manifest.txt").read_bytes() == (
            tmp_path / "b" / "manifest.txt"
        ).read_bytes()
        pid = a.manifest.train_ids[0]
        assert (tmp_path / "a" / "train" / f"{pid}_T1.png").read_bytes() == (
            tmp_path / "b" / "train" / f"{pid}_T1.png"
        ).read_bytes()

    def test_unreadable_volume_logged_not_fatal(self, tmp_path):
        volumes = tmp_path / "v"
        for i in range(4):
            write_patient(volumes, f"p{i}", seed=i)
        (volumes / "broken_t1.nii").write_bytes(b"not a volume")
        result = preprocess_volumes(volumes, tmp_path / "out", ratio=0.8, seed=1)
        ids = result.manifest.train_ids + result.manifest.test_ids
        assert len(ids) == 4
        assert any("broken" in a for a in result.anomalies)

    def test_no_matches_is_an_error(self, tmp_path):
        (tmp_path / "v").mkdir()
        with pytest.raises(DataError, match="no volumes matched"):
            preprocess_volumes(tmp_path / "v", tmp_path / "out", ratio=0.8, seed=0)


class TestNiftiIO:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(21)
        vol = rng.uniform(-10.0, 10.0, size=(7, 5, 4))
        write_volume(tmp_path / "x.nii", vol)
        back = read_volume(tmp_path / "x.nii")
        np.testing.assert_allclose(back, vol, atol=1e-5)

    def test_gzip_roundtrip(self, tmp_path):
        vol = np.arange(24.0).reshape(2, 3, 4)
        write_volume(tmp_path / "x.nii.gz", vol)
        np.testing.assert_allclose(read_volume(tmp_path / "x.nii.gz"), vol, atol=1e-5)

    def test_garbage_rejected(self, tmp_path):
        (tmp_path / "bad.nii").write_bytes(b"\x00" * 400)
        with pytest.raises(DataError):
            read_volume(tmp_path / "bad.nii")
