import numpy as np
import pytest

from sslvit import data
from sslvit.data import (Dataset, EmbeddingStore, read_dataset, read_embeddings,
                         split_classes, synth_dataset, synth_templates, write_dataset,
                         write_embeddings)
from sslvit.errors import (BadMagicError, ConfigError, FormatError, TruncatedFileError,
                           VersionError)


class TestDatasetRoundtrip:
    def test_roundtrip_bit_exact(self, tmp_path):
        ds = synth_dataset(3, 4, 16, seed=0)
        path = str(tmp_path / "ds.svds")
        write_dataset(ds, path)
        back = read_dataset(path)
        assert back.classes == ds.classes
        assert np.array_equal(back.images, ds.images)
        assert np.array_equal(back.labels, ds.labels)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.svds"
        p.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(BadMagicError):
            read_dataset(str(p))

    def test_truncated_payload(self, tmp_path):
        ds = synth_dataset(2, 2, 8, seed=1)
        path = str(tmp_path / "ds.svds")
        write_dataset(ds, path)
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[:-10])
        with pytest.raises(TruncatedFileError):
            read_dataset(path)

    def test_version_mismatch(self, tmp_path):
        ds = synth_dataset(2, 2, 8, seed=1)
        path = str(tmp_path / "ds.svds")
        write_dataset(ds, path)
        raw = bytearray(open(path, "rb").read())
        raw[4] = 7
        open(path, "wb").write(bytes(raw))
        with pytest.raises(VersionError):
            read_dataset(path)

    def test_label_outside_class_list_rejected(self):
        with pytest.raises(ConfigError):
            Dataset(classes=[0], images=np.zeros((1, 1, 2, 2), dtype=np.uint8),
                    labels=np.array([5]))


class TestSynthDataset:
    def test_noiseless_unshifted_equals_template(self):
        ds = synth_dataset(3, 1, 16, seed=7, noise_sigma=0.0, max_shift=0)
        templates = synth_templates(3, 16, seed=7)
        for cls in range(3):
            expected = np.clip(np.round(templates[cls] * 255.0), 0, 255).astype(np.uint8)
            assert np.array_equal(ds.images[cls], expected)

    def test_nearest_template_accuracy(self):
        ds = synth_dataset(8, 50, 32, seed=11)
        templates = synth_templates(8, 32, seed=11).reshape(8, -1) * 255.0
        flat = ds.images.reshape(len(ds), -1).astype(np.float64)
        d = ((flat[:, None, :] - templates[None, :, :]) ** 2).sum(axis=2)
        pred = d.argmin(axis=1)
        assert (pred == ds.labels).mean() > 0.95

    def test_same_seed_bit_identical(self):
        a = synth_dataset(4, 5, 16, seed=3)
        b = synth_dataset(4, 5, 16, seed=3)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)

    def test_different_seed_differs(self):
        a = synth_dataset(4, 5, 16, seed=3)
        b = synth_dataset(4, 5, 16, seed=4)
        assert not np.array_equal(a.images, b.images)

    def test_counts_rejected(self):
        with pytest.raises(ConfigError):
            synth_dataset(0, 1, 8, seed=0)


class TestSplitClasses:
    def test_fraction_split_matches_64_16_20(self):
        ds = synth_dataset(100, 2, 8, seed=5)
        parts = split_classes(ds, fractions=[0.64, 0.16, 0.20])
        assert [len(p.classes) for p in parts] == [64, 16, 20]

    def test_explicit_singleton_lists(self):
        ds = synth_dataset(2, 3, 8, seed=6)
        parts = split_classes(ds, class_lists=[[0], [1]])
        assert [p.classes for p in parts] == [[0], [1]]
        assert all(np.all(p.labels == p.classes[0]) for p in parts)

    def test_partition_preserves_samples(self):
        ds = synth_dataset(10, 4, 8, seed=8)
        parts = split_classes(ds, fractions=[0.5, 0.3, 0.2])
        assert sum(len(p) for p in parts) == len(ds)
        merged = np.concatenate([p.images.reshape(len(p), -1) for p in parts])
        assert np.array_equal(np.sort(merged.sum(axis=1)),
                              np.sort(ds.images.reshape(len(ds), -1).sum(axis=1)))

    def test_disjoint_class_sets(self):
        ds = synth_dataset(9, 2, 8, seed=9)
        parts = split_classes(ds, fractions=[1 / 3, 1 / 3, 1 / 3])
        seen = set()
        for p in parts:
            assert not (seen & set(p.classes))
            seen |= set(p.classes)

    def test_overlapping_lists_rejected(self):
        ds = synth_dataset(3, 2, 8, seed=10)
        with pytest.raises(ConfigError, match="multiple lists"):
            split_classes(ds, class_lists=[[0, 1], [1, 2]])

    def test_incomplete_partition_rejected(self):
        ds = synth_dataset(3, 2, 8, seed=10)
        with pytest.raises(ConfigError):
            split_classes(ds, class_lists=[[0], [1]])

    def test_bad_fractions_rejected(self):
        ds = synth_dataset(3, 2, 8, seed=10)
        with pytest.raises(ConfigError):
            split_classes(ds, fractions=[0.5, 0.4])


class TestEmbeddingStore:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(12)
        store = EmbeddingStore(features=rng.standard_normal((7, 5)),
                               labels=rng.integers(0, 4, size=7))
        path = str(tmp_path / "emb.ssle")
        write_embeddings(store, path)
        back = read_embeddings(path)
        assert back.dim == 5
        assert np.array_equal(back.features, store.features)
        assert np.array_equal(back.labels, store.labels)

    def test_double_roundtrip_identical_bytes(self, tmp_path):
        rng = np.random.default_rng(13)
        store = EmbeddingStore(features=rng.standard_normal((4, 3)),
                               labels=np.arange(4))
        p1, p2 = str(tmp_path / "a.ssle"), str(tmp_path / "b.ssle")
        write_embeddings(store, p1)
        write_embeddings(read_embeddings(p1), p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_empty_store_is_legal(self, tmp_path):
        store = EmbeddingStore(features=np.zeros((0, 6)), labels=np.zeros(0, dtype=int))
        path = str(tmp_path / "empty.ssle")
        write_embeddings(store, path)
        back = read_embeddings(path)
        assert len(back) == 0 and back.dim == 6

    def test_layout(self, tmp_path):
        store = EmbeddingStore(features=np.array([[1.0, 2.0]]), labels=np.array([9]))
        path = str(tmp_path / "emb.ssle")
        write_embeddings(store, path)
        raw = open(path, "rb").read()
        assert raw[:4] == b"SSLE"
        assert int.from_bytes(raw[4:8], "little") == 1   # version
        assert int.from_bytes(raw[8:16], "little") == 1  # N
        assert int.from_bytes(raw[16:20], "little") == 2  # dim
        assert np.array_equal(np.frombuffer(raw[20:28], dtype="<f4"), [1.0, 2.0])
        assert int.from_bytes(raw[28:32], "little") == 9

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.ssle"
        p.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(BadMagicError):
            read_embeddings(str(p))

    def test_truncated(self, tmp_path):
        store = EmbeddingStore(features=np.ones((3, 4)), labels=np.zeros(3, dtype=int))
        path = str(tmp_path / "t.ssle")
        write_embeddings(store, path)
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[:-6])
        with pytest.raises(TruncatedFileError):
            read_embeddings(path)

    def test_version_mismatch(self, tmp_path):
        store = EmbeddingStore(features=np.ones((1, 1)), labels=np.zeros(1, dtype=int))
        path = str(tmp_path / "v.ssle")
        write_embeddings(store, path)
        raw = bytearray(open(path, "rb").read())
        raw[4] = 2
        open(path, "wb").write(bytes(raw))
        with pytest.raises(VersionError):
            read_embeddings(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        store = EmbeddingStore(features=np.ones((1, 1)), labels=np.zeros(1, dtype=int))
        path = str(tmp_path / "g.ssle")
        write_embeddings(store, path)
        with open(path, "ab") as f:
            f.write(b"junk")
        with pytest.raises(FormatError):
            read_embeddings(path)
