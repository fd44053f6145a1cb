"""Dataset ingestion (IDX, CIFAR binary), augmentation, and batching."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np

from .errors import FormatError

DATA_ROOT_ENV = "BMPQ_DATA_ROOT"

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v: k for k, v in _IDX_DTYPES.items()}

CIFAR_PIXELS = 3 * 32 * 32


@dataclass
class DatasetHandle:
    images: np.ndarray  # uint8, (N, H, W, C)
    labels: np.ndarray  # int64, (N,)
    split: str
    classes: int
    mean: Optional[np.ndarray] = None  # per channel, in [0, 1] units
    std: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise FormatError(f"images {self.images.shape} and labels {self.labels.shape} disagree")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise FormatError(f"labels outside [0, {self.classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def geometry(self) -> Tuple[int, int, int]:
        """(C, H, W)."""
        n, h, w, c = self.images.shape
        return c, h, w

    def with_stats(self, mean=None, std=None) -> "DatasetHandle":
        """Attach normalization statistics (computed from these images by default)."""
        if mean is None:
            x = self.images.reshape(-1, self.images.shape[-1]) / 255.0
            mean, std = x.mean(axis=0), x.std(axis=0)
        return DatasetHandle(self.images, self.labels, self.split, self.classes,
                             np.asarray(mean, dtype=np.float64), np.asarray(std, dtype=np.float64))

    def subset(self, n: int) -> "DatasetHandle":
        return DatasetHandle(self.images[:n], self.labels[:n], self.split, self.classes,
                             self.mean, self.std)

    def to_float(self, images: Optional[np.ndarray] = None) -> np.ndarray:
        """Normalized float64 NCHW array."""
        images = self.images if images is None else images
        x = images.astype(np.float64) / 255.0
        if self.mean is not None:
            x = (x - self.mean) / self.std
        return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


# ---------------------------------------------------------------- IDX


def read_idx(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise FormatError(f"{path}: truncated IDX header", len(data))
    zero, code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0 or code not in _IDX_DTYPES:
        raise FormatError(f"{path}: bad IDX magic 0x{int.from_bytes(data[:4], 'big'):08x}", 0)
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"{path}: truncated IDX dimensions", len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header])
    dtype = _IDX_DTYPES[code]
    need = header + int(np.prod(dims)) * dtype.itemsize
    if len(data) != need:
        raise FormatError(f"{path}: expected {need} bytes for dims {dims}, found {len(data)}",
                          min(len(data), need))
    return np.frombuffer(data, dtype=dtype, offset=header).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder(">")
    code = _IDX_CODES.get(dtype) or _IDX_CODES.get(np.dtype(">" + array.dtype.char))
    if code is None:
        raise FormatError(f"dtype {array.dtype} has no IDX code")
    header = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(dtype).tobytes())


def load_idx(images_path, labels_path, split: str = "train", classes: int = 10) -> DatasetHandle:
    """Pair an IDX image file (magic 0x803) with an IDX label file (0x801)."""
    for path, magic in ((images_path, IDX_IMAGES_MAGIC), (labels_path, IDX_LABELS_MAGIC)):
        with open(path, "rb") as fh:
            head = fh.read(4)
        if len(head) < 4 or int.from_bytes(head, "big") != magic:
            raise FormatError(f"{path}: expected magic 0x{magic:08x}", 0)
    images = read_idx(images_path)
    labels = read_idx(labels_path).astype(np.int64)
    return DatasetHandle(images[..., None], labels, split, classes)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def resolve_root(root=None) -> Path:
    root = root or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise FileNotFoundError(f"no dataset root given and ${DATA_ROOT_ENV} is unset")
    return Path(root)


def load_mnist(root=None, split: str = "train") -> DatasetHandle:
    base = resolve_root(root)
    images, labels = MNIST_FILES[split]
    for cand in (base, base / "mnist"):
        if (cand / images).exists():
            return load_idx(cand / images, cand / labels, split)
    raise FileNotFoundError(f"MNIST {split} files not found under {base}")


# ---------------------------------------------------------------- CIFAR


def load_cifar_binary(paths, split: str = "train", label_bytes: int = 1,
                      classes: Optional[int] = None) -> DatasetHandle:
    """Read CIFAR binary batches: label byte(s) then 3072 CHW pixel bytes per record.

    ``label_bytes=2`` reads CIFAR-100 records (coarse, fine) and keeps the
    fine label.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    record = label_bytes + CIFAR_PIXELS
    chunks = []
    for path in paths:
        raw = Path(path).read_bytes()
        if len(raw) % record:
            raise FormatError(f"{path}: size {len(raw)} is not a multiple of {record}-byte records",
                              len(raw) - len(raw) % record)
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, record))
    rows = np.concatenate(chunks) if chunks else np.zeros((0, record), np.uint8)
    labels = rows[:, label_bytes - 1].astype(np.int64)
    images = rows[:, label_bytes:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    if classes is None:
        classes = 100 if label_bytes == 2 else 10
    return DatasetHandle(np.ascontiguousarray(images), labels, split, classes)


def write_cifar_binary(path, images: np.ndarray, labels, coarse=None) -> None:
    images = np.asarray(images, dtype=np.uint8).transpose(0, 3, 1, 2).reshape(len(images), -1)
    cols = [np.asarray(labels, dtype=np.uint8)[:, None]]
    if coarse is not None:
        cols.insert(0, np.asarray(coarse, dtype=np.uint8)[:, None])
    Path(path).write_bytes(np.concatenate(cols + [images], axis=1).tobytes())


CIFAR_FILES = {
    "cifar10": {"train": [f"data_batch_{i}.bin" for i in range(1, 6)], "test": ["test_batch.bin"]},
    "cifar100": {"train": ["train.bin"], "test": ["test.bin"]},
}
CIFAR_SUBDIRS = {"cifar10": "cifar-10-batches-bin", "cifar100": "cifar-100-binary"}


def load_cifar(name: str, root=None, split: str = "train") -> DatasetHandle:
    base = resolve_root(root)
    names = CIFAR_FILES[name][split]
    for cand in (base, base / CIFAR_SUBDIRS[name]):
        if all((cand / f).exists() for f in names):
            return load_cifar_binary([cand / f for f in names], split,
                                     label_bytes=2 if name == "cifar100" else 1)
    raise FileNotFoundError(f"{name} {split} files not found under {base}")


def load_tensor_container(path, split: str = "train", classes: Optional[int] = None) -> DatasetHandle:
    """Read a pre-converted ``.npz`` holding ``images`` (uint8 NHWC) and ``labels``."""
    with np.load(path) as z:
        missing = {"images", "labels"} - set(z.files)
        if missing:
            raise FormatError(f"{path}: missing arrays {sorted(missing)}")
        images, labels = z["images"], z["labels"].astype(np.int64)
    if images.dtype != np.uint8 or images.ndim != 4:
        raise FormatError(f"{path}: images must be uint8 NHWC, got {images.dtype} {images.shape}")
    if classes is None:
        classes = int(labels.max()) + 1 if len(labels) else 1
    return DatasetHandle(images, labels, split, classes)


def load_dataset(name: str, root=None, split: str = "train") -> DatasetHandle:
    """Load ``mnist``, ``cifar10``, ``cifar100`` or ``tiny-imagenet`` from a dataset root.

    Tiny-ImageNet is read from ``tiny-imagenet-{split}.npz`` containers.
    """
    if name == "mnist":
        return load_mnist(root, split)
    if name in CIFAR_FILES:
        return load_cifar(name, root, split)
    if name == "tiny-imagenet":
        return load_tensor_container(resolve_root(root) / f"tiny-imagenet-{split}.npz", split, 200)
    raise FormatError(f"unknown dataset {name!r}")


# ---------------------------------------------------------------- augmentation


def reflect_pad(image: np.ndarray, pad: int) -> np.ndarray:
    """Mirror padding without repeating the edge pixel (HWC image)."""
    return np.pad(image, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")


def crop(image: np.ndarray, top: int, left: int, h: int, w: int) -> np.ndarray:
    return image[top:top + h, left:left + w]


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1]


def augment(image: np.ndarray, rng: np.random.Generator, pad: int = 4,
            flip: bool = True) -> np.ndarray:
    """Random horizontal flip (p=0.5) then reflective pad and random crop."""
    h, w = image.shape[:2]
    if flip and rng.random() < 0.5:
        image = hflip(image)
    if pad:
        top, left = rng.integers(0, 2 * pad + 1, size=2)
        image = crop(reflect_pad(image, pad), top, left, h, w)
    return np.ascontiguousarray(image)


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad: int = 4,
                  flip: bool = True) -> np.ndarray:
    return np.stack([augment(img, rng, pad, flip) for img in images])


# ---------------------------------------------------------------- batching


def epoch_rng(seed: int, epoch: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, stream])


def batches(handle: DatasetHandle, batch_size: int, shuffle_seed: Optional[int] = None,
            epoch: int = 0) -> Iterator[np.ndarray]:
    """Yield index arrays; the order is a pure function of (seed, epoch).

    The last partial batch is kept.
    """
    n = len(handle)
    order = np.arange(n) if shuffle_seed is None else epoch_rng(shuffle_seed, epoch).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
