import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from dsfusion.data import (
    DatasetError,
    ImagePair,
    PatchGridSpec,
    crop_patches,
    grid_starts,
    load_pair,
    load_split_patches,
    pad_to_multiple,
    recombine,
    save_image,
    scan_dataset,
    to_luma_chroma,
)


def _write_png(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def _make_pair_files(root, pid, shape=(32, 32), with_label=True):
    rng = np.random.default_rng(abs(hash(pid)) % 2**32)
    _write_png(root / "ir" / f"{pid}.png", rng.integers(0, 256, shape, dtype=np.uint8))
    _write_png(root / "vi" / f"{pid}.png", rng.integers(0, 256, (*shape, 3), dtype=np.uint8))
    if with_label:
        _write_png(root / "labels" / f"{pid}.png", rng.integers(0, 2, shape, dtype=np.uint8))


class TestScan:
    def test_matching_rule(self, tmp_path):
        root = tmp_path / "train"
        _make_pair_files(root, "a", with_label=True)
        _make_pair_files(root, "b", with_label=False)
        refs = scan_dataset(tmp_path, "train")
        assert [r.id for r in refs] == ["a", "b"]
        assert refs[0].label_path is not None
        assert refs[1].label_path is None

    def test_missing_visible(self, tmp_path):
        root = tmp_path / "train"
        _write_png(root / "ir" / "a.png", np.zeros((8, 8), dtype=np.uint8))
        (root / "vi").mkdir()
        with pytest.raises(DatasetError, match="missing visible for a"):
            scan_dataset(tmp_path, "train")

    def test_five_pairs_name_order(self, tmp_path):
        root = tmp_path / "train"
        for pid in ["e", "a", "c", "b", "d"]:
            _make_pair_files(root, pid)
        refs = scan_dataset(tmp_path, "train")
        assert [r.id for r in refs] == ["a", "b", "c", "d", "e"]

    def test_empty_directory(self, tmp_path):
        (tmp_path / "train" / "ir").mkdir(parents=True)
        (tmp_path / "train" / "vi").mkdir(parents=True)
        with pytest.raises(DatasetError, match="no image pairs"):
            scan_dataset(tmp_path, "train")


class TestLoad:
    def test_normalization_extremes(self, tmp_path):
        root = tmp_path / "train"
        ir = np.zeros((8, 8), dtype=np.uint8)
        ir[0, 0] = 255
        _write_png(root / "ir" / "a.png", ir)
        _write_png(root / "vi" / "a.png", np.full((8, 8, 3), 255, dtype=np.uint8))
        pair = load_pair(scan_dataset(tmp_path, "train")[0])
        assert pair.infrared[0, 0] == 1.0
        assert pair.infrared[1, 1] == 0.0
        assert pair.visible.max() == 1.0

    def test_three_channel_infrared_takes_channel_zero(self, tmp_path):
        root = tmp_path / "train"
        ir = np.zeros((8, 8, 3), dtype=np.uint8)
        ir[..., 0] = 100
        ir[..., 1] = 200
        _write_png(root / "ir" / "a.png", ir)
        _write_png(root / "vi" / "a.png", np.zeros((8, 8, 3), dtype=np.uint8))
        pair = load_pair(scan_dataset(tmp_path, "train")[0])
        assert np.allclose(pair.infrared, 100 / 255.0)

    def test_shape_mismatch(self, tmp_path):
        root = tmp_path / "train"
        _write_png(root / "ir" / "a.png", np.zeros((48, 64), dtype=np.uint8))
        _write_png(root / "vi" / "a.png", np.zeros((48, 63, 3), dtype=np.uint8))
        with pytest.raises(DatasetError, match=r"\(48, 64\).*\(48, 63\)"):
            load_pair(scan_dataset(tmp_path, "train")[0])

    def test_load_save_load_idempotent(self, tmp_path, rng):
        arr = rng.random((16, 16)).astype(np.float32)
        save_image(tmp_path / "x.png", arr)
        first = np.asarray(Image.open(tmp_path / "x.png"))
        save_image(tmp_path / "y.png", first / 255.0)
        second = np.asarray(Image.open(tmp_path / "y.png"))
        assert np.array_equal(first, second)


def _pair(h, w, with_label=True, pid="p"):
    rng = np.random.default_rng(0)
    return ImagePair(
        infrared=rng.random((h, w)).astype(np.float32),
        visible=rng.random((h, w, 3)).astype(np.float32),
        label=rng.integers(0, 2, (h, w)).astype(np.int64) if with_label else None,
        id=pid,
    )


class TestCrop:
    def test_single_window(self):
        patches = crop_patches(_pair(256, 256), PatchGridSpec(256, 100))
        assert len(patches) == 1
        assert patches[0].shape == (256, 256)

    def test_448_grid(self):
        assert grid_starts(448, 256, 100) == [0, 100, 192]
        patches = crop_patches(_pair(448, 448), PatchGridSpec(256, 100))
        assert len(patches) == 9

    def test_480_by_640_grid(self):
        assert grid_starts(480, 256, 100) == [0, 100, 200, 224]
        assert grid_starts(640, 256, 100) == [0, 100, 200, 300, 384]
        patches = crop_patches(_pair(480, 640), PatchGridSpec(256, 100))
        assert len(patches) == 20

    def test_too_small(self):
        with pytest.raises(ValueError, match="exceeds"):
            crop_patches(_pair(100, 100), PatchGridSpec(256, 100))

    def test_labels_carried(self):
        patches = crop_patches(_pair(64, 64), PatchGridSpec(32, 20))
        assert all(p.label is not None and p.label.shape == (32, 32) for p in patches)

    def test_bad_spec(self):
        with pytest.raises(ValueError):
            PatchGridSpec(patch_size=32, stride=0)
        with pytest.raises(ValueError):
            PatchGridSpec(patch_size=32, stride=33)

    @given(
        dim=st.integers(8, 200),
        patch=st.integers(4, 64),
        stride=st.integers(1, 64),
    )
    def test_full_coverage_and_count(self, dim, patch, stride):
        if patch > dim or stride > patch:
            return
        starts = grid_starts(dim, patch, stride)
        coverage = np.zeros(dim, dtype=int)
        for s in starts:
            coverage[s : s + patch] += 1
        assert (coverage >= 1).all()
        assert starts == sorted(set(starts))
        expected = len(range(0, dim - patch + 1, stride))
        if (dim - patch) % stride != 0:
            expected += 1
        assert len(starts) == expected


class TestColor:
    def test_gray_fixed_point(self):
        v = np.full((4, 4, 3), 0.437, dtype=np.float32)
        lc = to_luma_chroma(v)
        assert np.allclose(lc.y, 0.437, atol=1e-6)
        assert np.allclose(lc.cb, 0.5, atol=1e-6)
        assert np.allclose(lc.cr, 0.5, atol=1e-6)

    def test_pure_red(self):
        v = np.zeros((2, 2, 3), dtype=np.float32)
        v[..., 0] = 1.0
        assert np.allclose(to_luma_chroma(v).y, 0.299, atol=1e-6)

    def test_roundtrip(self, rng):
        v = rng.random((16, 16, 3)).astype(np.float32)
        lc = to_luma_chroma(v)
        back = recombine(lc.y, lc.cb, lc.cr)
        assert np.abs(back - v).max() <= 1.0 / 255.0

    def test_range_check(self):
        with pytest.raises(ValueError):
            to_luma_chroma(np.full((2, 2, 3), 1.5, dtype=np.float32))


class TestPad:
    def test_roundtrip(self, rng):
        arr = rng.random((40, 56)).astype(np.float32)
        padded, size = pad_to_multiple(arr, 16)
        assert padded.shape == (48, 64)
        assert size == (40, 56)
        assert np.array_equal(padded[:40, :56], arr)

    def test_already_multiple(self, rng):
        arr = rng.random((32, 32)).astype(np.float32)
        padded, _ = pad_to_multiple(arr, 16)
        assert padded is arr


class TestSplitPatches:
    def test_loads_and_caches(self, small_root, tmp_path, monkeypatch):
        spec = PatchGridSpec(32, 32)
        plain = load_split_patches(small_root, "train", spec, require_labels=True)
        assert len(plain) == 4

        monkeypatch.setenv("DSF_CACHE", str(tmp_path / "cache"))
        first = load_split_patches(small_root, "train", spec, require_labels=True)
        assert list((tmp_path / "cache").glob("*.npz"))
        second = load_split_patches(small_root, "train", spec, require_labels=True)
        for a, b in zip(first, second):
            assert a.id == b.id
            assert np.array_equal(a.infrared, b.infrared)
            assert np.array_equal(a.label, b.label)

    def test_require_labels(self, tmp_path):
        root = tmp_path / "train"
        _make_pair_files(root, "a", with_label=False)
        with pytest.raises(DatasetError, match="labels required"):
            load_split_patches(tmp_path, "train", PatchGridSpec(32, 32), require_labels=True)
