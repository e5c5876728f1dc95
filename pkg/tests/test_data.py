"""Binary readers, corruption builders and the dataset cache."""

import math
import struct

import numpy as np
import pytest
from scipy import stats

from ccaug import data as Dt
from ccaug.data import DatasetSpec, ImageSet
from ccaug.diffaug import rotate_array


def _set(n=40, k=10, seed=0, size=8):
    rng = np.random.default_rng(seed)
    return ImageSet(rng.uniform(size=(n, 1, size, size)), np.arange(n) % k, [str(i) for i in range(k)])


class TestIdx:
    @pytest.mark.parametrize("suffix", ["", ".gz"])
    def test_roundtrip(self, tmp_path, suffix):
        imgs = np.random.default_rng(0).integers(0, 256, size=(5, 28, 28), dtype=np.uint8)
        labels = np.array([0, 9, 3, 3, 1], np.uint8)
        ip, lp = tmp_path / f"i{suffix}", tmp_path / f"l{suffix}"
        Dt.write_idx(ip, lp, imgs, labels)
        np.testing.assert_array_equal(Dt.read_idx_images(ip), imgs)
        np.testing.assert_array_equal(Dt.read_idx_labels(lp), labels)
        ds = Dt.load_mnist(ip, lp)
        assert ds.images.shape == (5, 1, 28, 28) and ds.images.dtype == np.float32
        assert ds.images.max() <= 1.0 and ds.images[0, 0].tobytes() == (imgs[0] / np.float32(255)).astype(
            np.float32).tobytes()

    def test_header_is_big_endian(self, tmp_path):
        Dt.write_idx(tmp_path / "i", tmp_path / "l", np.zeros((2, 3, 4)), np.zeros(2))
        raw = (tmp_path / "i").read_bytes()
        assert struct.unpack(">IIII", raw[:16]) == (0x803, 2, 3, 4)

    def test_bad_magic(self, tmp_path):
        Dt.write_idx(tmp_path / "i", tmp_path / "l", np.zeros((2, 3, 3)), np.zeros(2))
        with pytest.raises(Dt.DataFormatError, match="magic"):
            Dt.read_idx_images(tmp_path / "l")
        with pytest.raises(Dt.DataFormatError, match="magic"):
            Dt.read_idx_labels(tmp_path / "i")

    def test_truncated(self, tmp_path):
        Dt.write_idx(tmp_path / "i", tmp_path / "l", np.zeros((4, 3, 3)), np.zeros(4))
        raw = (tmp_path / "i").read_bytes()
        (tmp_path / "t").write_bytes(raw[:-5])
        with pytest.raises(Dt.DataFormatError, match="truncated"):
            Dt.read_idx_images(tmp_path / "t")
        (tmp_path / "h").write_bytes(raw[:10])
        with pytest.raises(Dt.DataFormatError):
            Dt.read_idx_images(tmp_path / "h")

    def test_count_mismatch(self, tmp_path):
        Dt.write_idx(tmp_path / "i", tmp_path / "l", np.zeros((4, 3, 3)), np.zeros(3))
        with pytest.raises(Dt.DataFormatError):
            Dt.load_mnist(tmp_path / "i", tmp_path / "l")


class TestCifar:
    def test_roundtrip_cifar10(self, tmp_path):
        rng = np.random.default_rng(1)
        imgs = rng.integers(0, 256, size=(3, 3, 32, 32))
        Dt.write_cifar(tmp_path / "b.bin", imgs, [4, 0, 9])
        assert (tmp_path / "b.bin").stat().st_size == 3 * 3073
        ds = Dt.load_cifar([tmp_path / "b.bin"])
        np.testing.assert_array_equal(ds.labels, [4, 0, 9])
        np.testing.assert_allclose(ds.images * 255, imgs, atol=1e-3)

    def test_cifar100_uses_fine_label(self, tmp_path):
        imgs = np.zeros((2, 3, 32, 32))
        Dt.write_cifar(tmp_path / "c.bin", imgs, [55, 3], "cifar100", coarse=[9, 1])
        assert (tmp_path / "c.bin").stat().st_size == 2 * 3074
        np.testing.assert_array_equal(Dt.load_cifar([tmp_path / "c.bin"], "cifar100").labels, [55, 3])

    def test_bad_length(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"\0" * 3072)
        with pytest.raises(Dt.DataFormatError):
            Dt.load_cifar([tmp_path / "x.bin"])

    def test_label_outside_names(self, tmp_path):
        Dt.write_cifar(tmp_path / "b.bin", np.zeros((1, 3, 32, 32)), [7])
        with pytest.raises(Dt.DataFormatError):
            Dt.load_cifar([tmp_path / "b.bin"], class_names=["a", "b"])

    def test_directories(self, data_root):
        c10 = Dt.load_cifar10_dir(data_root, "train")
        assert len(c10) == 50 and c10.class_names[0] == "airplane"
        sub = Dt.cifar100_subset(Dt.load_cifar100_dir(data_root, "train"))
        assert sub.class_names == list(Dt.CIFAR100_SUBSET)
        assert set(sub.labels) <= set(range(10)) and (np.bincount(sub.labels, minlength=10) >= 2).all()

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            Dt.load_mnist_dir(tmp_path)
        with pytest.raises(FileNotFoundError):
            Dt.load_cifar10_dir(tmp_path)


class TestImageSet:
    def test_accessors(self):
        ds = _set()
        item = ds[3]
        assert item.label == 3 and math.isnan(item.param)
        assert len(ds.of_class(2)) == 4 and ds.class_index("7") == 7 and ds.class_index(7) == 7
        with pytest.raises(KeyError):
            ds.class_index("cat")
        with pytest.raises(KeyError):
            ds.class_index(10)
        assert len(ds.head(5)) == 5 and list(ds.head(5).source_index) == [0, 1, 2, 3, 4]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ImageSet(np.zeros((3, 1, 4, 4)), [0, 1], ["a", "b"])


class TestCorruption:
    def test_rotation_params_uniform_per_class(self):
        ds = _set(4000, k=2, size=4)
        out = Dt.corrupt_rotation(ds, [math.pi / 4, math.pi], seed=0)
        for c, r in ((0, math.pi / 4), (1, math.pi)):
            p = out.params[out.labels == c]
            assert np.abs(p).max() <= r
            crit = 1.63 / math.sqrt(len(p))
            assert stats.kstest(p, stats.uniform(-r, 2 * r).cdf).statistic < crit

    def test_rotation_applies_recorded_angle(self):
        ds = _set(6, k=2)
        out = Dt.corrupt_rotation(ds, [0.0, 1.0], seed=3)
        assert (out.params[ds.labels == 0] == 0).all()
        np.testing.assert_array_equal(out.images[0], ds.images[0])
        np.testing.assert_array_equal(out.images[1], rotate_array(ds.images[1:2], out.params[1:2])[0])

    def test_rotation_depends_on_source_index_only(self):
        ds = _set(20)
        full = Dt.corrupt_rotation(ds, np.full(10, 1.0), seed=1)
        part = Dt.corrupt_rotation(ds.subset([5, 17]), np.full(10, 1.0), seed=1)
        np.testing.assert_array_equal(part.params, full.params[[5, 17]])

    def test_rotation_range_check(self):
        with pytest.raises(ValueError):
            Dt.corrupt_rotation(_set(), np.full(10, 4.0), seed=0)

    def test_brightness(self):
        ds = _set(400, k=4, size=4)
        out = Dt.corrupt_brightness(ds, ["1", "3"], 0.2, seed=0)
        hit = np.isin(ds.labels, [1, 3])
        assert np.isnan(out.params[~hit]).all()
        assert np.abs(out.params[hit]).max() <= 0.2
        np.testing.assert_array_equal(out.images[~hit], ds.images[~hit])
        i = np.flatnonzero(hit)[0]
        np.testing.assert_allclose(out.images[i], np.clip(ds.images[i] + out.params[i], 0, 1), atol=1e-6)
        assert stats.kstest(out.params[hit], stats.uniform(-0.2, 0.4).cdf).statistic < 1.63 / math.sqrt(hit.sum())


class TestSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            DatasetSpec("svhn")
        with pytest.raises(ValueError):
            DatasetSpec("mnist", "shear")
        with pytest.raises(ValueError):
            DatasetSpec("mnist", "rotation", {"1": 4.0})
        with pytest.raises(ValueError):
            DatasetSpec("mnist", None, {"1": 0.5})
        with pytest.raises(ValueError):
            DatasetSpec("mnist", "rotation", {"1": -0.1})
        with pytest.raises(ValueError):
            DatasetSpec("cifar10", "brightness", {"cat": 1.5})

    def test_resolve_and_roundtrip(self):
        s = DatasetSpec("mnist", "rotation", {"6": 0.5, "9": 0.5}, subset=100)
        np.testing.assert_array_equal(s.resolve([str(i) for i in range(10)]), [0] * 6 + [0.5, 0, 0, 0.5])
        with pytest.raises(KeyError):
            s.resolve(["a", "b"])
        assert DatasetSpec.from_dict(s.to_dict()) == s
        t = s.with_split("test", seed=5)
        assert t.split == "test" and t.seed == 5 and t.subset is None

    def test_build_and_cache(self, data_root, tmp_path):
        s = DatasetSpec("mnist", "rotation", {"3": 1.0}, subset=20)
        a = Dt.cached_dataset(s, data_root, tmp_path / "cache")
        files = list((tmp_path / "cache").iterdir())
        assert len(a) == 20 and len(files) == 1
        b = Dt.cached_dataset(s, data_root, tmp_path / "cache")
        assert a.images.tobytes() == b.images.tobytes()
        np.testing.assert_array_equal(a.params, b.params)
        c = Dt.build_dataset(s, data_root)
        assert c.images.tobytes() == a.images.tobytes()
        assert (a.params[a.labels != 3] == 0).all() and (a.params[a.labels == 3] != 0).all()

    def test_brightness_needs_single_width(self, data_root):
        s = DatasetSpec("cifar10", "brightness", {"cat": 0.2, "dog": 0.1})
        with pytest.raises(ValueError):
            Dt.build_dataset(s, data_root)

    def test_unknown_class_name(self, data_root):
        with pytest.raises(KeyError):
            Dt.build_dataset(DatasetSpec("cifar10", "brightness", {"kitten": 0.2}), data_root)
