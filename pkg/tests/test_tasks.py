import gzip
import struct

import numpy as np
import pytest

from protonesy.tasks import (
    IdxFormatError,
    MnistStore,
    build_even_odd,
    build_support,
    even_odd_combinations,
    find_mnist,
    gen_synthetic,
    idx_image_bytes,
    idx_label_bytes,
    load_idx,
    load_synthetic,
    parse_idx_images,
    parse_idx_labels,
    save_synthetic,
    write_idx,
)


def fake_store(per_digit: int, seed: int = 0, rows: int = 4, cols: int = 4) -> MnistStore:
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(10, dtype=np.uint8), per_digit)
    labels = labels[rng.permutation(len(labels))]
    pixels = rng.integers(0, 256, (len(labels), rows * cols), dtype=np.uint8)
    return MnistStore(pixels, labels, rows, cols)


class TestIdx:
    def test_image_magic_bytes(self):
        raw = bytes([0, 0, 8, 3]) + struct.pack(">III", 1, 2, 2) + bytes([0, 64, 128, 255])
        pixels, rows, cols = parse_idx_images(raw)
        assert (rows, cols) == (2, 2)
        np.testing.assert_array_equal(pixels, [[0, 64, 128, 255]])

    def test_wrong_label_magic(self):
        with pytest.raises(IdxFormatError, match="wrong magic"):
            parse_idx_labels(struct.pack(">II", 2050, 0))

    def test_truncated(self):
        raw = struct.pack(">IIII", 2051, 2, 2, 2) + bytes(7)
        with pytest.raises(IdxFormatError):
            parse_idx_images(raw)
        with pytest.raises(IdxFormatError):
            parse_idx_labels(struct.pack(">I", 2049))

    def test_count_mismatch(self, tmp_path):
        store = fake_store(2)
        (tmp_path / "img").write_bytes(idx_image_bytes(store))
        (tmp_path / "lbl").write_bytes(struct.pack(">II", 2049, 3) + bytes(3))
        with pytest.raises(IdxFormatError):
            load_idx(tmp_path / "img", tmp_path / "lbl")

    def test_round_trip_bytes(self, tmp_path):
        store = fake_store(3, rows=28, cols=28)
        img, lbl = idx_image_bytes(store), idx_label_bytes(store)
        again = MnistStore(parse_idx_images(img)[0], parse_idx_labels(lbl))
        assert idx_image_bytes(again) == img and idx_label_bytes(again) == lbl

    def test_gzip_and_normalisation(self, tmp_path):
        store = fake_store(1)
        (tmp_path / "i.gz").write_bytes(gzip.compress(idx_image_bytes(store)))
        (tmp_path / "l.gz").write_bytes(gzip.compress(idx_label_bytes(store)))
        loaded = load_idx(tmp_path / "i.gz", tmp_path / "l.gz")
        np.testing.assert_array_equal(loaded.pixels, store.pixels)
        assert loaded.images.max() <= 1.0 and loaded.images.min() >= 0.0
        np.testing.assert_allclose(loaded.images, store.pixels / 255.0)

    def test_find_mnist(self, tmp_path):
        write_idx(fake_store(1), tmp_path / "train-images-idx3-ubyte", tmp_path / "train-labels-idx1-ubyte")
        write_idx(fake_store(1), tmp_path / "t10k-images-idx3-ubyte", tmp_path / "t10k-labels-idx1-ubyte")
        files = find_mnist(tmp_path)
        assert files["train"][0].name == "train-images-idx3-ubyte"
        with pytest.raises(FileNotFoundError):
            find_mnist(tmp_path / "missing")


class TestEvenOdd:
    def test_bundled_combinations(self):
        combos = even_odd_combinations()
        assert len(combos) == 16 and len(set(combos)) == 16
        assert all(a % 2 == b % 2 for a, b in combos)
        assert all((b, a) in combos for a, b in combos)
        assert (0, 6) in combos and (3, 9) in combos

    def test_documented_labels(self):
        splits = build_even_odd(fake_store(2000), fake_store(200, 1), seed=0, sizes=(600, 100, 300))
        tr = splits["train"]
        pairs = {tuple(c): int(y) for c, y in zip(tr.concepts, tr.labels)}
        assert pairs[(0, 6)] == 6
        assert pairs[(3, 9)] == 12

    def test_split_structure(self):
        splits = build_even_odd(fake_store(2000), fake_store(200, 1), seed=3, sizes=(600, 100, 300))
        assert [len(splits[s]) for s in ("train", "val", "test")] == [600, 100, 300]
        combos = set(even_odd_combinations())
        for s in ("train", "val"):
            ds = splits[s]
            assert {tuple(c) for c in ds.concepts} <= combos
            np.testing.assert_array_equal(ds.labels, ds.concepts.sum(axis=1))
        test = splits["test"].concepts
        assert np.any(test[:, 0] % 2 != test[:, 1] % 2)
        # train and val never share an image
        assert not set(splits["train"].image_ids()) & set(splits["val"].image_ids())

    def test_full_sizes_and_determinism(self):
        train, test = fake_store(6000), fake_store(1000, 1)
        a = build_even_odd(train, test, seed=5)
        b = build_even_odd(train, test, seed=5)
        assert [len(a[s]) for s in ("train", "val", "test")] == [6720, 1920, 960]
        for s in a:
            np.testing.assert_array_equal(a[s].left, b[s].left)
            np.testing.assert_array_equal(a[s].right, b[s].right)

    def test_scales_down_small_stores(self, caplog):
        splits = build_even_odd(fake_store(50), fake_store(20, 1), seed=0)
        n = [len(splits[s]) for s in ("train", "val", "test")]
        assert n[0] < 6720
        assert n[0] / n[1] == pytest.approx(6720 / 1920, rel=0.05)
        assert "scaling" in caplog.text

    def test_missing_digit(self):
        store = fake_store(10)
        keep = store.labels != 4
        with pytest.raises(ValueError):
            build_even_odd(MnistStore(store.pixels[keep], store.labels[keep], 4, 4), fake_store(5), seed=0)


class TestSupport:
    def setup_method(self):
        self.ds = gen_synthetic(sizes=(300, 50, 50), seed=1).splits["train"]

    def test_one_label_per_class(self):
        sup = build_support(self.ds, 1, seed=0)
        assert len(sup) == 10 and sup.classes == list(range(10))
        for c, ids in sup.ids.items():
            assert all(self.ds.digits[i] == c for i in ids)

    def test_restricted_classes(self):
        sup = build_support(self.ds, 2, seed=0, classes=range(8))
        assert sup.classes == list(range(8)) and len(sup) == 16

    def test_deterministic(self):
        assert build_support(self.ds, 3, seed=9).ids == build_support(self.ds, 3, seed=9).ids

    def test_support_not_in_evaluation(self):
        splits = build_even_odd(fake_store(2000), fake_store(200, 1), seed=0, sizes=(600, 100, 300))
        sup = build_support(splits["train"], 5, seed=0)
        ids = {i for v in sup.ids.values() for i in v}
        assert not ids & set(splits["val"].image_ids())

    def test_absent_class(self):
        ds = gen_synthetic(sizes=(300, 50, 50), seed=1, combos=[(0, 2), (2, 0)]).splits["train"]
        with pytest.raises(ValueError):
            build_support(ds, 1, seed=0)

    def test_invalid_count(self):
        with pytest.raises(ValueError):
            build_support(self.ds, 0)


class TestSynthetic:
    def test_counts(self):
        task = gen_synthetic(h=10, sizes=(1000, 200, 200), seed=0)
        assert [len(task.splits[s]) for s in ("train", "val", "test")] == [1000, 200, 200]

    def test_separation_and_bayes_error(self):
        task = gen_synthetic(separation=10.0, seed=0)
        d = np.linalg.norm(task.means[:, None] - task.means[None], axis=-1)
        np.testing.assert_allclose(d[~np.eye(10, dtype=bool)], 10.0)
        # nearest-mean classification of the generated samples is essentially error free
        ds = task.splits["test"]
        pred = np.argmin(((ds.images[:, None] - task.means) ** 2).sum(-1), axis=1)
        assert np.mean(pred == ds.digits) > 0.999

    def test_invalid(self):
        with pytest.raises(ValueError):
            gen_synthetic(separation=0.0)
        with pytest.raises(ValueError):
            gen_synthetic(d=5)

    def test_restricted_training_pairs(self):
        ds = gen_synthetic(seed=2).splits["train"]
        assert {tuple(c) for c in ds.concepts} <= set(even_odd_combinations())
        np.testing.assert_array_equal(ds.labels, ds.concepts.sum(axis=1))

    def test_deterministic_and_saved(self, tmp_path):
        a = gen_synthetic(seed=4, sizes=(50, 10, 10))
        b = gen_synthetic(seed=4, sizes=(50, 10, 10))
        np.testing.assert_array_equal(a.splits["train"].images, b.splits["train"].images)
        save_synthetic(a, tmp_path, {"seed": 4})
        c = load_synthetic(tmp_path)
        for s in a.splits:
            for key in ("images", "digits", "left", "right", "labels"):
                np.testing.assert_array_equal(getattr(c.splits[s], key), getattr(a.splits[s], key))
