import numpy as np
import pytest

import prunekit as pk
from prunekit.data import (CIFAR_BATCH_RECORDS, CIFAR_RECORD, DataError,
                           load_cifar10, synth_dataset)


class TestSynthDataset:
    def test_same_seed_bit_identical(self):
        a = synth_dataset(3, 20, image_size=8, seed=11)
        b = synth_dataset(3, 20, image_size=8, seed=11)
        assert a.train_images.tobytes() == b.train_images.tobytes()
        assert a.test_images.tobytes() == b.test_images.tobytes()
        assert (a.train_labels == b.train_labels).all()

    def test_different_seed_differs(self):
        a = synth_dataset(3, 20, image_size=8, seed=1)
        b = synth_dataset(3, 20, image_size=8, seed=2)
        assert a.train_images.tobytes() != b.train_images.tobytes()

    def test_label_histogram_exactly_uniform(self):
        ds = synth_dataset(4, 25, image_size=8, seed=0, test_per_class=7)
        np.testing.assert_array_equal(np.bincount(ds.train_labels), [25] * 4)
        np.testing.assert_array_equal(np.bincount(ds.test_labels), [7] * 4)

    def test_pixels_in_unit_interval(self):
        ds = synth_dataset(3, 10, image_size=8, seed=0)
        for imgs in (ds.train_images, ds.test_images):
            assert imgs.min() >= 0.0 and imgs.max() <= 1.0

    def test_degenerate_parameters_rejected(self):
        with pytest.raises(DataError):
            synth_dataset(1, 10)
        with pytest.raises(DataError):
            synth_dataset(3, 0)
        with pytest.raises(DataError):
            synth_dataset(3, 10, image_size=2)

    def test_learnable_by_reference_network(self):
        # the reference CNN should reach < 10% test error within 30 epochs
        ds = synth_dataset(3, 500, image_size=12, seed=0, test_per_class=100)
        rng = np.random.default_rng(0)
        net = pk.Network.initialize(pk.reference_specs(3, 12, 3),
                                    ds.image_shape, 3, rng)
        log = pk.train_baseline(net, ds, epochs=30, eta=0.02, seed=0)
        best = min(e["test_error"] for e in log)
        assert best < 0.10, f"best test error {best:.3f}"


def _write_cifar_dir(tmp_path, rng):
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]
    blobs = {}
    for name in names:
        raw = rng.integers(0, 256, size=CIFAR_RECORD * CIFAR_BATCH_RECORDS,
                           dtype=np.uint8).reshape(CIFAR_BATCH_RECORDS, CIFAR_RECORD)
        raw[:, 0] = rng.integers(0, 10, size=CIFAR_BATCH_RECORDS)
        (tmp_path / name).write_bytes(raw.tobytes())
        blobs[name] = raw
    return blobs


class TestCifar10:
    def test_batch_file_size_is_format_arithmetic(self, tmp_path, rng):
        _write_cifar_dir(tmp_path, rng)
        assert (tmp_path / "data_batch_1.bin").stat().st_size == 30730000

    def test_record_zero_label_and_pixel_bytes(self, tmp_path, rng):
        blobs = _write_cifar_dir(tmp_path, rng)
        ds = load_cifar10(tmp_path)
        raw = blobs["data_batch_1.bin"]
        assert ds.train_labels[0] == raw[0, 0]
        # pixel (0,0) of the red plane of record 0 is byte 1 of the file
        assert ds.train_images[0, 0, 0, 0] == raw[0, 1] / 255.0
        # blue plane starts after two 1024-byte planes
        assert ds.train_images[0, 2, 0, 0] == raw[0, 1 + 2048] / 255.0

    def test_counts_and_caps(self, tmp_path, rng):
        _write_cifar_dir(tmp_path, rng)
        ds = load_cifar10(tmp_path, train_cap=123, test_cap=45)
        assert len(ds.train_images) == 123
        assert len(ds.test_images) == 45

    def test_wrong_file_size_rejected(self, tmp_path, rng):
        _write_cifar_dir(tmp_path, rng)
        path = tmp_path / "data_batch_3.bin"
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(DataError, match="bytes"):
            load_cifar10(tmp_path)

    def test_label_byte_out_of_range_rejected(self, tmp_path, rng):
        _write_cifar_dir(tmp_path, rng)
        path = tmp_path / "data_batch_1.bin"
        blob = bytearray(path.read_bytes())
        blob[0] = 11
        path.write_bytes(bytes(blob))
        with pytest.raises(DataError, match="label byte"):
            load_cifar10(tmp_path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(DataError, match="missing"):
            load_cifar10(tmp_path)


class TestDatasetContainer:
    def test_batches_cover_split_deterministically(self, tiny_dataset):
        seen = []
        for xb, yb in tiny_dataset.iter_batches("train", 32):
            seen.append(len(yb))
        assert sum(seen) == len(tiny_dataset.train_labels)

    def test_sample_batch_is_normalized(self, tiny_dataset, rng):
        xb, _ = tiny_dataset.sample_batch("train", 64, rng)
        assert abs(xb.data.mean()) < 0.5

    def test_unknown_split_rejected(self, tiny_dataset):
        with pytest.raises(DataError, match="unknown split"):
            tiny_dataset.split("validation")
