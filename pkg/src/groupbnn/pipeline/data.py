"""Dataset ingestion: IDX files (MNIST family) and CIFAR-10 binary batches.

Every parsing failure raises a :class:`DataError` subclass that records the
byte offset where the problem was detected.
"""

from __future__ import annotations

import gzip
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from groupbnn.tensor_core import DTYPE

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
CIFAR_RECORD = 3073  # 1 label byte + 3*32*32 pixel bytes

_IDX_DTYPES = {
    0x08: np.dtype("u1"), 0x09: np.dtype("i1"), 0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8"),
}
_IDX_CODES = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_DTYPES.items()}


class DataError(Exception):
    """Malformed dataset file. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, path=None, offset: int | None = None):
        where = f"{path}: " if path is not None else ""
        at = f" (at byte {offset})" if offset is not None else ""
        super().__init__(f"{where}{message}{at}")
        self.path = path
        self.offset = offset


class MagicError(DataError):
    pass


class TruncatedError(DataError):
    def __init__(self, path, expected: int, actual: int):
        super().__init__(f"truncated file: expected {expected} bytes, found {actual}", path, actual)
        self.expected = expected
        self.actual = actual


class CountMismatchError(DataError):
    pass


def _read_bytes(path) -> bytes:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError as exc:
        raise DataError("file not found", path) from exc
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise DataError(f"corrupt gzip stream: {exc}", path) from exc
    return raw


def parse_idx(raw: bytes, path=None, expected_magic: int | None = None) -> np.ndarray:
    if len(raw) < 4:
        raise TruncatedError(path, 4, len(raw))
    magic = int.from_bytes(raw[:4], "big")
    if raw[0] or raw[1] or raw[2] not in _IDX_DTYPES or raw[3] == 0:
        raise MagicError(f"bad IDX magic 0x{magic:08x}", path, 0)
    if expected_magic is not None and magic != expected_magic:
        raise MagicError(f"expected magic 0x{expected_magic:08x}, found 0x{magic:08x}", path, 0)
    dtype, ndim = _IDX_DTYPES[raw[2]], raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedError(path, header, len(raw))
    dims = tuple(int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim))
    expected = header + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) < expected:
        raise TruncatedError(path, expected, len(raw))
    if len(raw) > expected:
        raise DataError(f"{len(raw) - expected} trailing bytes after the IDX payload", path, expected)
    data = np.frombuffer(raw, dtype=dtype, offset=header)
    return data.reshape(dims).astype(dtype.newbyteorder("="))


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    return parse_idx(_read_bytes(path), path, expected_magic)


def write_idx(path, array, compress: bool | None = None):
    """Write ``array`` as an IDX file; gzip when the name ends in ``.gz``."""
    array = np.asarray(array)
    native = array.dtype.newbyteorder("=")
    if native not in _IDX_CODES:
        raise ValueError(f"dtype {array.dtype} has no IDX code")
    code = _IDX_CODES[native]
    header = bytes([0, 0, code, array.ndim]) + b"".join(
        int(d).to_bytes(4, "big") for d in array.shape)
    payload = header + np.ascontiguousarray(array, dtype=_IDX_DTYPES[code]).tobytes()
    path = Path(path)
    if compress if compress is not None else path.suffix == ".gz":
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)


@dataclass
class Normalization:
    mean: float
    std: float

    @classmethod
    def fit(cls, pixels: np.ndarray) -> "Normalization":
        x = np.asarray(pixels, dtype=np.float64) / 255.0
        std = float(x.std())
        return cls(float(x.mean()), std if std > 0 else 1.0)

    def apply(self, pixels: np.ndarray) -> np.ndarray:
        x = np.asarray(pixels, dtype=np.float64) / 255.0
        return ((x - self.mean) / self.std).astype(DTYPE)


@dataclass
class DatasetSplit:
    images: np.ndarray  # (n, c, h, w) float32, normalized
    labels: np.ndarray  # (n,) int64
    split_tag: str

    def __post_init__(self):
        if self.split_tag not in ("train", "val", "test"):
            raise ValueError(f"split_tag must be train, val or test, got {self.split_tag!r}")
        if self.images.ndim != 4:
            raise ValueError(f"images must be (n, c, h, w), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise CountMismatchError(
                f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index, split_tag: str | None = None) -> "DatasetSplit":
        return DatasetSplit(self.images[index], self.labels[index], split_tag or self.split_tag)


def read_idx_pair(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Raw uint8 images (n, 1, h, w) and int64 labels, counts cross-checked."""
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.ndim != 3:
        raise MagicError(f"image file must hold a 3-d array, found {images.ndim}-d", images_path, 3)
    if labels.ndim != 1:
        raise MagicError(f"label file must hold a 1-d array, found {labels.ndim}-d", labels_path, 3)
    if len(images) != len(labels):
        # the count field sits right after the magic number in both files
        raise CountMismatchError(
            f"{len(images)} images in {images_path} but {len(labels)} labels", labels_path, 4)
    return images[:, None], labels.astype(np.int64)


def load_idx_dataset(images_path, labels_path, split_tag: str = "train",
                     normalization: Normalization | None = None) -> DatasetSplit:
    """Parsed, validated and normalized split; statistics are fitted when not given."""
    images, labels = read_idx_pair(images_path, labels_path)
    normalization = normalization or Normalization.fit(images)
    return DatasetSplit(normalization.apply(images), labels, split_tag)


def _find(root: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (root / name).exists():
            return root / name
    raise DataError(f"no {stem}[.gz] in {root}")


def _split_off_val(images, labels, val_size):
    if val_size >= len(labels):
        raise DataError(f"val_size {val_size} leaves no training data ({len(labels)} samples)")
    cut = len(labels) - val_size
    return (images[:cut], labels[:cut]), (images[cut:], labels[cut:])


def _finish(train, val, test):
    norm = Normalization.fit(train[0])
    return {
        "train": DatasetSplit(norm.apply(train[0]), train[1], "train"),
        "val": DatasetSplit(norm.apply(val[0]), val[1], "val"),
        "test": DatasetSplit(norm.apply(test[0]), test[1], "test"),
    }


def load_mnist(root, val_size: int = 5000) -> dict[str, DatasetSplit]:
    """train/val/test from the four standard IDX files; val is the tail of train.

    Normalization statistics come from the training part only.
    """
    root = Path(root)
    train = read_idx_pair(_find(root, "train-images-idx3-ubyte"), _find(root, "train-labels-idx1-ubyte"))
    test = read_idx_pair(_find(root, "t10k-images-idx3-ubyte"), _find(root, "t10k-labels-idx1-ubyte"))
    train, val = _split_off_val(*train, val_size)
    return _finish(train, val, test)


def read_cifar10_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """Raw uint8 images (n, 3, 32, 32) and labels from one binary batch file."""
    raw = _read_bytes(path)
    if not raw or len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD
        raise TruncatedError(path, (whole + 1) * CIFAR_RECORD, len(raw))
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataError(f"label {labels[bad[0]]} out of range", path, int(bad[0]) * CIFAR_RECORD)
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def load_cifar10(root, val_size: int = 5000) -> dict[str, DatasetSplit]:
    root = Path(root)
    batches = sorted(root.glob("data_batch_*.bin"))
    if not batches:
        raise DataError(f"no data_batch_*.bin files in {root}")
    parts = [read_cifar10_batch(p) for p in batches]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    test = read_cifar10_batch(root / "test_batch.bin")
    train, val = _split_off_val(images, labels, val_size)
    return _finish(train, val, test)


def load_dataset(name: str, root, val_size: int) -> dict[str, DatasetSplit]:
    if name == "mnist":
        return load_mnist(root, val_size)
    if name == "cifar10":
        return load_cifar10(root, val_size)
    raise DataError(f"unknown dataset {name!r}")
