"""
Dataset ingestion and splitting.

CIFAR binary layout: one record per image, label byte(s) followed by
3 x 32 x 32 pixel bytes, channel-major (R, G, B) and row-major within a
channel. CIFAR-10 records have one label byte; CIFAR-100 records have a
coarse and a fine label byte, and only the fine label is used.
"""

from __future__ import annotations

import hashlib
import os
import tarfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import requests
from tqdm import tqdm

from hebbian_engine.tensor_core import DimensionError, Rng, Tensor

IMAGE_BYTES = 3 * 32 * 32

CIFAR10_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}
CIFAR10_RECORDS_PER_FILE = 10000
CIFAR100_FILES = {"train": ["train.bin"], "test": ["test.bin"]}
CIFAR100_RECORDS = {"train": 50000, "test": 10000}

ARCHIVES = {
    "cifar10": (
        "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz",
        "cifar-10-batches-bin",
    ),
    "cifar100": (
        "https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz",
        "cifar-100-binary",
    ),
}


class DatasetFormatError(ValueError):
    """A dataset file is missing or does not have the expected size."""


@dataclass
class Dataset:
    images: Tensor
    labels: np.ndarray
    name: str
    num_classes: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) == 0:
            raise ValueError(f"Dataset '{self.name}' is empty")
        if self.images.ndim != 4:
            raise DimensionError(f"Expected N x C x H x W images, got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DimensionError(
                f"{len(self.images)} images but {len(self.labels)} labels in '{self.name}'"
            )
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(
                f"Labels of '{self.name}' must be in [0, {self.num_classes}), "
                f"got [{self.labels.min()}, {self.labels.max()}]"
            )

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


@dataclass
class RegimeSplit:
    labeled_idx: list[int]
    unlabeled_idx: list[int]
    val_idx: list[int]
    r_percent: float
    seed: int

    @property
    def train_idx(self) -> list[int]:
        """Every training index, labeled or not (the Hebbian pre-training set)."""
        return sorted(self.labeled_idx + self.unlabeled_idx)


def read_cifar_binary(
    path: str | Path,
    label_offset: int = 0,
    label_bytes: int = 1,
    expected_records: int | None = None,
) -> tuple[Tensor, np.ndarray]:
    """
    Parse one CIFAR binary file into (N x 3 x 32 x 32 images in [0, 1], labels).
    """
    path = Path(path)
    record_size = label_bytes + IMAGE_BYTES
    expected = (
        f"{expected_records} records of {record_size} bytes"
        if expected_records is not None
        else f"a multiple of {record_size} bytes"
    )
    if not path.is_file():
        raise DatasetFormatError(f"Missing dataset file {path} (expected {expected})")
    raw = np.fromfile(path, dtype=np.uint8)
    if (
        raw.size == 0
        or raw.size % record_size != 0
        or (expected_records is not None and raw.size != expected_records * record_size)
    ):
        raise DatasetFormatError(
            f"Dataset file {path} has {raw.size} bytes, expected {expected}"
        )
    records = raw.reshape(-1, record_size)
    labels = records[:, label_offset].astype(np.int64)
    images = records[:, label_bytes:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


def _dataset_dir(directory: str | Path, subdir: str) -> Path:
    directory = Path(directory)
    return directory / subdir if (directory / subdir).is_dir() else directory


def load_cifar10(
    directory: str | Path,
    split: str = "train",
    records_per_file: int | None = CIFAR10_RECORDS_PER_FILE,
) -> Dataset:
    """Five training batches (50,000 images) or the test batch (10,000)."""
    if split not in CIFAR10_FILES:
        raise ValueError(f"Unknown split '{split}', expected one of {list(CIFAR10_FILES)}")
    root = _dataset_dir(directory, ARCHIVES["cifar10"][1])
    # read every file before building anything so a bad file leaves no partial dataset
    parts = [
        read_cifar_binary(root / name, expected_records=records_per_file)
        for name in CIFAR10_FILES[split]
    ]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return Dataset(images, labels, f"cifar10-{split}", 10)


def load_cifar100(
    directory: str | Path, split: str = "train", check_size: bool = True
) -> Dataset:
    if split not in CIFAR100_FILES:
        raise ValueError(f"Unknown split '{split}', expected one of {list(CIFAR100_FILES)}")
    root = _dataset_dir(directory, ARCHIVES["cifar100"][1])
    images, labels = read_cifar_binary(
        root / CIFAR100_FILES[split][0],
        label_offset=1,
        label_bytes=2,
        expected_records=CIFAR100_RECORDS[split] if check_size else None,
    )
    return Dataset(images, labels, f"cifar100-{split}", 100)


def subset(dataset: Dataset, indices) -> Dataset:
    indices = np.asarray(indices, dtype=np.int64)
    return Dataset(
        dataset.images[indices], dataset.labels[indices], dataset.name, dataset.num_classes
    )


def downsample(dataset: Dataset, image_size: int) -> Dataset:
    """Block-average images down to image_size x image_size."""
    _, C, H, W = dataset.images.shape
    if (H, W) == (image_size, image_size):
        return dataset
    if H % image_size or W % image_size:
        raise ValueError(f"Cannot downsample {H}x{W} images to {image_size}x{image_size}")
    fh, fw = H // image_size, W // image_size
    images = dataset.images.reshape(-1, C, image_size, fh, image_size, fw).mean(axis=(3, 5))
    return Dataset(images, dataset.labels, dataset.name, dataset.num_classes)


def dataset_fingerprint(dataset: Dataset) -> str:
    digest = hashlib.sha256()
    digest.update(f"{dataset.name}:{dataset.num_classes}:{dataset.images.shape}".encode())
    digest.update(np.ascontiguousarray(dataset.images).tobytes())
    digest.update(np.ascontiguousarray(dataset.labels).tobytes())
    return digest.hexdigest()


def labeled_count(num_train: int, r_percent: float) -> int:
    """round(r / 100 * |train|), halves rounded up."""
    return int(np.floor(r_percent / 100.0 * num_train + 0.5))


def stratified_order(labels: np.ndarray, rng: Rng) -> np.ndarray:
    """
    Interleave the classes round-robin (class order and within-class order
    both seeded), so that every prefix is class-balanced to within one sample
    while classes last.
    """
    classes = np.unique(labels)
    class_order = classes[rng.spawn("classes").permutation(len(classes))]
    pools = []
    for c in class_order:
        members = np.flatnonzero(labels == c)
        pools.append(members[rng.spawn("class", int(c)).permutation(len(members))])
    order = []
    for rank in range(max(len(p) for p in pools)):
        order.extend(int(p[rank]) for p in pools if rank < len(p))
    return np.asarray(order, dtype=np.int64)


def make_split(
    dataset: Dataset, val_fraction: float, r_percent: float, seed: int
) -> RegimeSplit:
    """
    Validation set first (a seeded random val_fraction of the data), then a
    class-stratified labeled subset of the remaining training pool.

    The labeled ordering depends only on the seed and the training pool, and
    each regime takes a prefix of it, so smaller regimes are subsets of
    larger ones.
    """
    if not 0 < r_percent <= 100:
        raise ValueError(f"r_percent must be in (0, 100], got {r_percent}")
    if not 0 <= val_fraction < 1:
        raise ValueError(f"val_fraction must be in [0, 1), got {val_fraction}")
    rng = Rng(seed).spawn("split")
    n = len(dataset)
    n_val = int(np.floor(val_fraction * n + 0.5))
    permutation = rng.spawn("val").permutation(n)
    val_idx = np.sort(permutation[:n_val])
    train_pool = np.sort(permutation[n_val:])

    n_labeled = labeled_count(len(train_pool), r_percent)
    if n_labeled == 0:
        raise ValueError(
            f"r = {r_percent}% of {len(train_pool)} training samples gives no labeled samples"
        )
    order = train_pool[stratified_order(dataset.labels[train_pool], rng.spawn("labeled"))]
    labeled = order[:n_labeled]
    unlabeled = np.setdiff1d(train_pool, labeled)
    return RegimeSplit(
        labeled_idx=sorted(int(i) for i in labeled),
        unlabeled_idx=[int(i) for i in unlabeled],
        val_idx=[int(i) for i in val_idx],
        r_percent=float(r_percent),
        seed=int(seed),
    )


class GaussianStream:
    """
    Zero-mean Gaussian samples with covariance Q diag(eigvals) Q^T for a seeded
    random orthogonal Q.
    """

    def __init__(self, dim: int, eigvals, seed: int):
        eigvals = np.asarray(eigvals, dtype=np.float64)
        if eigvals.shape != (dim,):
            raise DimensionError(f"Expected {dim} eigenvalues, got {eigvals.shape}")
        if np.any(eigvals <= 0):
            raise ValueError(f"Eigenvalues must be positive, got {eigvals.tolist()}")
        self.dim = dim
        self.eigvals = eigvals
        rng = Rng(seed).spawn("gaussian-stream")
        q, r = np.linalg.qr(rng.spawn("basis").normal((dim, dim)))
        self.basis = q * np.sign(np.diag(r))
        self._rng = rng.spawn("samples")

    @property
    def covariance(self) -> Tensor:
        return (self.basis * self.eigvals) @ self.basis.T

    def sample(self, n: int) -> Tensor:
        z = self._rng.normal((n, self.dim))
        return (z * np.sqrt(self.eigvals)) @ self.basis.T

    def batches(self, batch_size: int):
        while True:
            yield self.sample(batch_size)


def synth_gaussian_stream(dim: int, eigvals, seed: int) -> GaussianStream:
    return GaussianStream(dim, eigvals, seed)


def synth_image_dataset(
    num_samples: int,
    num_classes: int = 10,
    image_shape: tuple[int, int, int] = (3, 32, 32),
    seed: int = 0,
    noise: float = 0.15,
    name: str = "synthetic",
) -> Dataset:
    """
    Class-conditional images: a smooth random prototype per class plus
    Gaussian pixel noise, clipped to [0, 1]. Classes are balanced.
    """
    rng = Rng(seed).spawn("synthetic", name)
    C, H, W = image_shape
    coarse = rng.spawn("prototypes").uniform(0.0, 1.0, (num_classes, C, max(H // 4, 1), max(W // 4, 1)))
    prototypes = np.repeat(np.repeat(coarse, H // coarse.shape[2], axis=2), W // coarse.shape[3], axis=3)
    prototypes = np.pad(
        prototypes,
        ((0, 0), (0, 0), (0, H - prototypes.shape[2]), (0, W - prototypes.shape[3])),
        mode="edge",
    )
    labels = (np.arange(num_samples) % num_classes)[rng.spawn("labels").permutation(num_samples)]
    images = prototypes[labels] + noise * rng.spawn("noise").normal((num_samples, C, H, W))
    return Dataset(np.clip(images, 0.0, 1.0), labels, name, num_classes)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def fetch_dataset(
    name: str, directory: str | Path, sha256: str | None = None, url: str | None = None
) -> Path:
    """
    Download and extract a dataset archive. The SHA-256 of the archive is
    checked against `sha256` before extraction; without one the computed
    digest is written next to the archive.
    """
    if name not in ARCHIVES:
        raise ValueError(f"Unknown dataset '{name}', expected one of {list(ARCHIVES)}")
    default_url, subdir = ARCHIVES[name]
    url = url or default_url
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    archive = directory / os.path.basename(url)

    print(f"Downloading {url} to {archive}")
    try:
        with requests.get(url, stream=True, timeout=60) as response:
            response.raise_for_status()
            total = int(response.headers.get("content-length", 0)) or None
            with open(archive, "wb") as f, tqdm(total=total, unit="B", unit_scale=True) as bar:
                for chunk in response.iter_content(chunk_size=1 << 20):
                    f.write(chunk)
                    bar.update(len(chunk))
    except Exception:
        # no partial archive is left behind
        archive.unlink(missing_ok=True)
        raise

    digest = _sha256(archive)
    if sha256 is None:
        print(f"WARNING: no expected SHA-256 given for {archive.name}; computed {digest}")
        archive.with_suffix(archive.suffix + ".sha256").write_text(f"{digest}  {archive.name}\n")
    elif digest != sha256.lower():
        archive.unlink()
        raise ValueError(f"SHA-256 mismatch for {archive.name}: expected {sha256}, got {digest}")

    with tarfile.open(archive, "r:gz") as tar:
        if hasattr(tarfile, "data_filter"):
            tar.extractall(directory, filter="data")
        else:
            tar.extractall(directory)
    print(f"Extracted {archive.name} to {directory / subdir}")
    return directory / subdir
