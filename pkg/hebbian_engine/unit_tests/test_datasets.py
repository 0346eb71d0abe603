"""
Test experiment_control: datasets.py
"""

import hashlib
import io
import tarfile
import tempfile
from pathlib import Path
from unittest import mock

import numpy as np
import numpy.testing as npt
import requests

from experiment_control.datasets import (
    IMAGE_BYTES,
    Dataset,
    DatasetFormatError,
    dataset_fingerprint,
    downsample,
    fetch_dataset,
    labeled_count,
    load_cifar10,
    load_cifar100,
    make_split,
    read_cifar_binary,
    synth_gaussian_stream,
    synth_image_dataset,
)
from hebbian_engine.oracle import exact_pca, subspace_angle
from hebbian_engine.unit_tests._engine_base_test import _EngineBaseTest


def cifar_records(labels, label_bytes=1, coarse=7):
    """Records whose pixel bytes count up from the label."""
    out = bytearray()
    for label in labels:
        if label_bytes == 2:
            out += bytes([coarse, label])
        else:
            out += bytes([label])
        out += bytes((label + i) % 256 for i in range(IMAGE_BYTES))
    return bytes(out)


class CifarBinaryTest(_EngineBaseTest):
    def setUp(self):
        super().setUp()
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_two_records(self):
        path = self.dir / "two.bin"
        path.write_bytes(cifar_records([3, 9]))
        images, labels = read_cifar_binary(path)
        npt.assert_array_equal(labels, [3, 9])
        assert images.shape == (2, 3, 32, 32)
        # channel-major, row-major within a channel
        assert images[0, 0, 0, 0] == 3 / 255
        assert images[0, 0, 0, 1] == 4 / 255
        assert images[0, 1, 0, 0] == ((3 + 1024) % 256) / 255
        assert images[1, 2, 31, 31] == ((9 + IMAGE_BYTES - 1) % 256) / 255

    def test_fine_label_of_cifar100(self):
        path = self.dir / "c100.bin"
        path.write_bytes(cifar_records([42, 99], label_bytes=2))
        _, labels = read_cifar_binary(path, label_offset=1, label_bytes=2)
        npt.assert_array_equal(labels, [42, 99])

    def test_truncated_file(self):
        path = self.dir / "short.bin"
        path.write_bytes(cifar_records([1, 2])[:-5])
        with self.assertRaises(DatasetFormatError):
            read_cifar_binary(path)
        path.write_bytes(cifar_records([1, 2]))
        with self.assertRaises(DatasetFormatError):
            read_cifar_binary(path, expected_records=3)

    def test_missing_file(self):
        with self.assertRaises(DatasetFormatError):
            read_cifar_binary(self.dir / "absent.bin")
        with self.assertRaises(DatasetFormatError):
            load_cifar10(self.dir, "train", records_per_file=2)

    def test_load_cifar10(self):
        root = self.dir / "cifar-10-batches-bin"
        root.mkdir()
        for i in range(1, 6):
            (root / f"data_batch_{i}.bin").write_bytes(cifar_records([i, i + 1]))
        (root / "test_batch.bin").write_bytes(cifar_records([0, 5]))
        train = load_cifar10(self.dir, "train", records_per_file=2)
        assert len(train) == 10 and train.num_classes == 10
        npt.assert_array_equal(train.labels, [1, 2, 2, 3, 3, 4, 4, 5, 5, 6])
        test = load_cifar10(root, "test", records_per_file=2)
        npt.assert_array_equal(test.labels, [0, 5])
        with self.assertRaises(ValueError):
            load_cifar10(self.dir, "validation")

    def test_load_cifar100(self):
        (self.dir / "test.bin").write_bytes(cifar_records([12, 88, 0], label_bytes=2))
        test = load_cifar100(self.dir, "test", check_size=False)
        assert test.num_classes == 100
        npt.assert_array_equal(test.labels, [12, 88, 0])
        with self.assertRaises(DatasetFormatError):
            load_cifar100(self.dir, "test")


class DatasetTest(_EngineBaseTest):
    def test_dataset_checks(self):
        with self.assertRaises(ValueError):
            Dataset(np.zeros((0, 3, 2, 2)), np.zeros(0), "empty", 10)
        with self.assertRaises(ValueError):
            Dataset(np.zeros((2, 3, 2, 2)), np.array([0, 10]), "labels", 10)

    def test_downsample(self):
        images = np.arange(2 * 3 * 4 * 4, dtype=float).reshape(2, 3, 4, 4)
        small = downsample(Dataset(images, np.array([0, 1]), "x", 2), 2)
        assert small.image_shape == (3, 2, 2)
        npt.assert_allclose(small.images[0, 0, 0, 0], np.mean([0, 1, 4, 5]))
        with self.assertRaises(ValueError):
            downsample(small, 3)

    def test_synthetic_images(self):
        a = synth_image_dataset(100, 10, (3, 8, 8), seed=4)
        b = synth_image_dataset(100, 10, (3, 8, 8), seed=4)
        assert a.image_shape == (3, 8, 8)
        npt.assert_array_equal(np.bincount(a.labels), [10] * 10)
        assert dataset_fingerprint(a) == dataset_fingerprint(b)
        assert dataset_fingerprint(a) != dataset_fingerprint(synth_image_dataset(100, 10, (3, 8, 8), seed=5))
        assert a.images.min() >= 0.0 and a.images.max() <= 1.0


class SplitTest(_EngineBaseTest):
    def setUp(self):
        super().setUp()
        self.dataset = synth_image_dataset(600, 10, (3, 4, 4), seed=0)

    def test_labeled_counts(self):
        regimes = [1, 2, 3, 4, 5, 10, 25, 100]
        expected = [400, 800, 1200, 1600, 2000, 4000, 10000, 40000]
        assert [labeled_count(40000, r) for r in regimes] == expected
        assert labeled_count(10, 25) == 3
        assert labeled_count(2, 25) == 1

    def test_split_partitions_the_data(self):
        split = make_split(self.dataset, 0.2, 5, seed=0)
        assert len(split.val_idx) == 120
        assert len(split.labeled_idx) == labeled_count(480, 5)
        labeled, unlabeled, val = set(split.labeled_idx), set(split.unlabeled_idx), set(split.val_idx)
        assert not labeled & val and not unlabeled & val and not labeled & unlabeled
        assert labeled | unlabeled | val == set(range(600))
        assert split.train_idx == sorted(labeled | unlabeled)

    def test_labeled_subset_is_stratified(self):
        for r in (2, 5, 10, 25):
            split = make_split(self.dataset, 0.2, r, seed=1)
            counts = np.bincount(self.dataset.labels[split.labeled_idx], minlength=10)
            assert counts.max() - counts.min() <= 1, f"r={r}: class counts {counts.tolist()}"

    def test_regimes_are_nested(self):
        regimes = [1, 2, 5, 10, 25, 100]
        splits = [make_split(self.dataset, 0.2, r, seed=2) for r in regimes]
        for small, large in zip(splits, splits[1:]):
            assert set(small.labeled_idx) <= set(large.labeled_idx)
            assert small.val_idx == large.val_idx
        assert len(splits[-1].unlabeled_idx) == 0

    def test_split_is_seeded(self):
        a = make_split(self.dataset, 0.2, 10, seed=3)
        b = make_split(self.dataset, 0.2, 10, seed=3)
        c = make_split(self.dataset, 0.2, 10, seed=4)
        assert a.labeled_idx == b.labeled_idx and a.val_idx == b.val_idx
        assert a.val_idx != c.val_idx

    def test_empty_labeled_set(self):
        with self.assertRaises(ValueError):
            make_split(self.dataset, 0.2, 0.01, seed=0)
        with self.assertRaises(ValueError):
            make_split(self.dataset, 0.2, 0, seed=0)


class GaussianStreamTest(_EngineBaseTest):
    def test_planted_covariance(self):
        eigvals = [9.0, 4.0, 1.0]
        stream = synth_gaussian_stream(3, eigvals, seed=0)
        npt.assert_allclose(stream.basis.T @ stream.basis, np.eye(3), atol=1e-12)
        npt.assert_allclose(np.sort(np.linalg.eigvalsh(stream.covariance))[::-1], eigvals, atol=1e-12)
        samples = stream.sample(50000)
        npt.assert_allclose(np.cov(samples.T), stream.covariance, atol=0.25)

    def test_planted_top_direction(self):
        stream = synth_gaussian_stream(2, [9.0, 1.0], seed=0)
        oracle = exact_pca(stream.sample(10000))
        assert subspace_angle(stream.basis[:, :1].T, oracle.top(1)) < 5.0

    def test_isotropic_covariance(self):
        stream = synth_gaussian_stream(4, [2.0] * 4, seed=0)
        samples = stream.sample(20000)
        covariance = samples.T @ samples / len(samples)
        assert np.abs(covariance - 2.0 * np.eye(4)).max() < 0.05 * 2.0

    def test_same_seed_same_samples(self):
        a = synth_gaussian_stream(2, [2.0, 1.0], seed=7)
        b = synth_gaussian_stream(2, [2.0, 1.0], seed=7)
        npt.assert_array_equal(next(a.batches(5)), b.sample(5))

    def test_invalid_eigenvalues(self):
        with self.assertRaises(ValueError):
            synth_gaussian_stream(2, [1.0, 0.0], seed=0)
        with self.assertRaises(ValueError):
            synth_gaussian_stream(3, [1.0, 1.0], seed=0)


class FetchTest(_EngineBaseTest):
    url = "https://example.org/cifar-10-binary.tar.gz"

    def archive_bytes(self):
        buffer = io.BytesIO()
        payload = cifar_records([1, 2])
        with tarfile.open(fileobj=buffer, mode="w:gz") as tar:
            info = tarfile.TarInfo("cifar-10-batches-bin/test_batch.bin")
            info.size = len(payload)
            tar.addfile(info, io.BytesIO(payload))
        return buffer.getvalue()

    def fake_response(self, content):
        response = mock.MagicMock(status_code=200, headers={"content-length": str(len(content))})
        response.__enter__.return_value = response
        response.__exit__.return_value = False
        response.iter_content.return_value = [content[:100], content[100:]]
        return response

    def test_fetch_extracts_and_records_digest(self):
        content = self.archive_bytes()
        with tempfile.TemporaryDirectory() as tmp, mock.patch(
            "experiment_control.datasets.requests.get", return_value=self.fake_response(content)
        ):
            root = fetch_dataset("cifar10", tmp, url=self.url)
            assert root == Path(tmp) / "cifar-10-batches-bin"
            npt.assert_array_equal(load_cifar10(tmp, "test", records_per_file=2).labels, [1, 2])
            recorded = (Path(tmp) / "cifar-10-binary.tar.gz.sha256").read_text().split()[0]
            assert recorded == hashlib.sha256(content).hexdigest()

    def test_fetch_checks_digest(self):
        content = self.archive_bytes()
        with tempfile.TemporaryDirectory() as tmp, mock.patch(
            "experiment_control.datasets.requests.get", return_value=self.fake_response(content)
        ):
            with self.assertRaises(ValueError):
                fetch_dataset("cifar10", tmp, sha256="0" * 64, url=self.url)
            assert not (Path(tmp) / "cifar-10-binary.tar.gz").exists()
            assert not (Path(tmp) / "cifar-10-batches-bin").exists()

    def test_http_error_leaves_nothing(self):
        response = self.fake_response(b"")
        response.raise_for_status.side_effect = requests.HTTPError("404 Client Error")
        with tempfile.TemporaryDirectory() as tmp, mock.patch(
            "experiment_control.datasets.requests.get", return_value=response
        ):
            with self.assertRaises(requests.HTTPError):
                fetch_dataset("cifar10", tmp, url=self.url)
            assert not (Path(tmp) / "cifar-10-binary.tar.gz").exists()
            response.__exit__.assert_called_once()

    def test_broken_stream_removes_partial_archive(self):
        def chunks(chunk_size):
            yield b"partial"
            raise requests.ConnectionError("connection reset")

        response = self.fake_response(b"")
        response.iter_content.side_effect = chunks
        with tempfile.TemporaryDirectory() as tmp, mock.patch(
            "experiment_control.datasets.requests.get", return_value=response
        ):
            with self.assertRaises(requests.ConnectionError):
                fetch_dataset("cifar10", tmp, url=self.url)
            assert not (Path(tmp) / "cifar-10-binary.tar.gz").exists()
            response.__exit__.assert_called_once()

    def test_unknown_dataset(self):
        with self.assertRaises(ValueError):
            fetch_dataset("mnist", "data")
