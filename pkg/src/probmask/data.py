"""Datasets: MNIST-style IDX files, seeded Gaussian blobs, and mini-batching."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IDXError(ValueError):
    pass


class IDXMagicError(IDXError):
    pass


class IDXTruncatedError(IDXError):
    pass


class IDXCountMismatchError(IDXError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, ...) float64
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        if len(self.labels) < 1:
            raise ValueError("dataset must contain at least one example")
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels differ in length")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("label outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes)


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_header(raw: bytes, magic: int, ndim: int, path) -> tuple[int, ...]:
    need = 4 * (1 + ndim)
    if len(raw) < need:
        raise IDXTruncatedError(f"{path}: header needs {need} bytes, file has {len(raw)}")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise IDXMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:need])
    if len(raw) - need < int(np.prod(dims)):
        raise IDXTruncatedError(
            f"{path}: payload has {len(raw) - need} bytes, header promises {int(np.prod(dims))}")
    return dims


def read_idx_images(path) -> np.ndarray:
    raw = _read_bytes(path)
    n, rows, cols = _parse_header(raw, IMAGE_MAGIC, 3, path)
    return np.frombuffer(raw, np.uint8, n * rows * cols, 16).reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    raw = _read_bytes(path)
    (n,) = _parse_header(raw, LABEL_MAGIC, 1, path)
    return np.frombuffer(raw, np.uint8, n, 8)


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Images become (N, 1, rows, cols) floats in [0, 1] (pixel / 255)."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise IDXCountMismatchError(
            f"{len(images)} images but {len(labels)} labels ({images_path}, {labels_path})")
    inputs = images[:, None, :, :].astype(np.float64) / 255.0
    return Dataset(inputs, labels.astype(np.int64), num_classes)


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Inverse of ``load_idx`` for (N, 1, rows, cols) image datasets."""
    x = dataset.inputs
    if x.ndim == 4:
        x = x[:, 0]
    pixels = np.rint(x * 255.0)
    if x.ndim != 3 or pixels.min() < 0 or pixels.max() > 255:
        raise ValueError("write_idx needs (N, rows, cols) images with values in [0, 1]")
    n, rows, cols = x.shape
    Path(images_path).write_bytes(
        struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + pixels.astype(np.uint8).tobytes())
    Path(labels_path).write_bytes(
        struct.pack(">II", LABEL_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes())


def _find(directory: Path, stem: str) -> Path | None:
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    return None


def load_mnist_split(directory, train_size: int | None = 2000, eval_size: int | None = None,
                     seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded subset of an MNIST directory as ``(train, eval)``.

    The train split is the first ``train_size`` examples of a seeded shuffle of the
    training files. If ``t10k-*`` files are present they provide the eval split;
    otherwise it is taken from the shuffled examples that follow the train split.
    """
    d = Path(directory)
    tr_img, tr_lab = _find(d, "train-images-idx3-ubyte"), _find(d, "train-labels-idx1-ubyte")
    if tr_img is None or tr_lab is None:
        raise FileNotFoundError(f"no train-images/train-labels IDX files in {d}")
    full = load_idx(tr_img, tr_lab)
    perm = np.random.default_rng(seed).permutation(len(full))
    n_train = len(full) if train_size is None else min(train_size, len(full))
    train = full.subset(perm[:n_train])

    te_img, te_lab = _find(d, "t10k-images-idx3-ubyte"), _find(d, "t10k-labels-idx1-ubyte")
    if te_img is not None and te_lab is not None:
        test = load_idx(te_img, te_lab)
        n_eval = len(test) if eval_size is None else min(eval_size, len(test))
        return train, test.subset(np.arange(n_eval))
    rest = perm[n_train:]
    if eval_size is not None:
        rest = rest[:eval_size]
    if len(rest) == 0:
        raise ValueError("no examples left for evaluation; lower train_size")
    return train, full.subset(rest)


def synth_blobs(seed: int, n_per_class: int, classes: int, dim: int, spread: float) -> Dataset:
    """Gaussian clusters around ``classes`` random points on the unit sphere."""
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((classes, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.repeat(np.arange(classes), n_per_class)
    inputs = centers[labels] + spread * rng.standard_normal((len(labels), dim))
    order = rng.permutation(len(labels))
    return Dataset(inputs[order], labels[order].astype(np.int64), classes)


def batches(dataset: Dataset, batch_size: int, epoch_seed) -> list[np.ndarray]:
    """Index arrays of a seeded permutation cut into contiguous chunks.

    ``epoch_seed`` may be an int or a tuple such as ``(seed, epoch)``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    seed = list(epoch_seed) if isinstance(epoch_seed, (tuple, list)) else epoch_seed
    perm = np.random.default_rng(seed).permutation(len(dataset))
    return [perm[i:i + batch_size] for i in range(0, len(perm), batch_size)]
