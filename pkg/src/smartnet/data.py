"""Binary dataset parsers (IDX, CIFAR) and deterministic mini-batching."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from smartnet.errors import DataError, ParseError, UsageError
from smartnet.rng import substream

IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {np.dtype(v).newbyteorder("="): k for k, v in IDX_TYPES.items()}
MAX_ELEMENTS = 1 << 40
CIFAR_PIXELS = 3 * 32 * 32


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images and labels disagree on N")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.images[idx].copy(), self.labels[idx].copy(), self.num_classes)

    def head(self, n: int) -> "Dataset":
        return self.subset(np.arange(min(n, len(self))))


def _read_bytes(path) -> bytes:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if path.suffix == ".gz":
        try:
            raw = gzip.decompress(raw)
        except OSError as exc:
            raise ParseError(f"{path}: bad gzip stream", 0) from exc
    return raw


def decode_idx(raw: bytes) -> np.ndarray:
    """Decode an IDX buffer into a native-endian array."""
    if len(raw) < 4:
        raise ParseError("truncated IDX header", len(raw))
    if raw[0] != 0 or raw[1] != 0 or raw[2] not in IDX_TYPES:
        raise ParseError(f"bad IDX magic {raw[:4].hex()}", 0)
    dtype = IDX_TYPES[raw[2]]
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError("truncated IDX dimension list", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = 1
    for i, d in enumerate(dims):
        count *= d
        if count > MAX_ELEMENTS:
            raise ParseError(f"IDX dimensions overflow ({dims})", 4 + 4 * i)
    need = header + count * dtype.itemsize
    if len(raw) < need:
        raise ParseError(f"truncated IDX payload: need {need} bytes, have {len(raw)}", len(raw))
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=header).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))


def read_idx(path) -> np.ndarray:
    return decode_idx(_read_bytes(path))


def encode_idx(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    code = _IDX_CODES.get(array.dtype.newbyteorder("="))
    if code is None:
        raise ValueError(f"dtype {array.dtype} has no IDX type code")
    head = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    return head + array.astype(IDX_TYPES[code]).tobytes()


def write_idx(path, array: np.ndarray) -> None:
    data = encode_idx(array)
    path = Path(path)
    path.write_bytes(gzip.compress(data, mtime=0) if path.suffix == ".gz" else data)


def _to_unit(pixels: np.ndarray) -> np.ndarray:
    if pixels.dtype == np.uint8:
        return pixels.astype(np.float32) / np.float32(255.0)
    return np.clip(pixels.astype(np.float32), 0.0, 1.0)


def parse_idx(images_path, labels_path=None, num_classes: int = 10) -> Dataset:
    """Load an IDX image file (N, H, W) or (N, C, H, W) and optional label file.

    Without a label file every label is 0.
    """
    pixels = read_idx(images_path)
    if pixels.ndim == 3:
        pixels = pixels[:, None]
    elif pixels.ndim != 4:
        raise ParseError(f"IDX image file must be 3-D or 4-D, got {pixels.ndim}-D", 3)
    if labels_path is None:
        labels = np.zeros(pixels.shape[0], dtype=np.int64)
    else:
        labels = read_idx(labels_path).astype(np.int64).reshape(-1)
        if labels.shape[0] != pixels.shape[0]:
            raise ParseError(f"{labels.shape[0]} labels for {pixels.shape[0]} images", 4)
        bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
        if bad.size:
            raise ParseError(f"label {labels[bad[0]]} out of range", 8 + int(bad[0]))
    return Dataset(_to_unit(pixels), labels, num_classes)


def parse_cifar_binary(path, num_classes: int = 10, label_bytes: int = 1) -> Dataset:
    """Parse CIFAR binary records: ``label_bytes`` label(s) + 3072 CHW pixel bytes.

    For CIFAR-100 (``label_bytes=2``) the second (fine) label is used.
    """
    paths = path if isinstance(path, (list, tuple)) else [path]
    images, labels = [], []
    rec = label_bytes + CIFAR_PIXELS
    for p in paths:
        raw = _read_bytes(p)
        if len(raw) == 0 or len(raw) % rec:
            whole = len(raw) // rec
            raise ParseError(f"{p}: truncated CIFAR record", whole * rec)
        table = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
        lab = table[:, label_bytes - 1].astype(np.int64)
        bad = np.flatnonzero(lab >= num_classes)
        if bad.size:
            raise ParseError(f"{p}: label {lab[bad[0]]} out of range", int(bad[0]) * rec)
        images.append(table[:, label_bytes:].reshape(-1, 3, 32, 32))
        labels.append(lab)
    return Dataset(_to_unit(np.concatenate(images)), np.concatenate(labels), num_classes)


def encode_cifar_binary(images_u8: np.ndarray, labels) -> bytes:
    images_u8 = np.asarray(images_u8, dtype=np.uint8).reshape(-1, CIFAR_PIXELS)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    return np.concatenate([labels, images_u8], axis=1).tobytes()


def write_cifar_binary(path, images_u8: np.ndarray, labels) -> None:
    Path(path).write_bytes(encode_cifar_binary(images_u8, labels))


def to_uint8(ds: Dataset) -> np.ndarray:
    return np.rint(ds.images * 255.0).astype(np.uint8)


# ---------------------------------------------------------------- bundled data


def mnist5k_dir() -> Path:
    return Path(str(resources.files("smartnet") / "datasets" / "mnist5k"))


def load_mnist5k(split: str = "train") -> Dataset:
    """4,000-train / 1,000-test MNIST subset shipped with the package."""
    root = mnist5k_dir()
    prefix = "train" if split == "train" else "t10k"
    return parse_idx(root / f"{prefix}-images-idx3-ubyte.gz", root / f"{prefix}-labels-idx1-ubyte.gz")


def stratified_subset(ds: Dataset, n: int = 4000, seed: int = 0) -> Dataset:
    """Class-stratified random subset of ``n`` images."""
    rng = substream(seed, "subset")
    per = n // ds.num_classes
    picks = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        picks.append(rng.choice(idx, size=min(per, idx.size), replace=False))
    return ds.subset(np.sort(np.concatenate(picks)))


# ---------------------------------------------------------------- batching


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int
    seed: int = 0
    augment: bool = False

    def order(self, n: int, epoch: int = 0) -> np.ndarray:
        return substream(self.seed, "shuffle", epoch).permutation(n)


def _augment(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    n, c, h, w = x.shape
    flip = rng.random(n) < 0.5
    x = np.where(flip[:, None, None, None], x[..., ::-1], x)
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    out = np.empty_like(x)
    for i in range(n):
        out[i] = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
    return out


def batches(ds: Dataset, plan: BatchPlan, epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Shuffled full batches for one epoch; the trailing partial batch is dropped."""
    aug_rng = substream(plan.seed, "augment", epoch) if plan.augment else None
    for idx in batch_indices(ds, plan, epoch):
        x = ds.images[idx]
        if aug_rng is not None:
            x = _augment(x, aug_rng)
        yield np.ascontiguousarray(x), ds.labels[idx]


def batch_indices(ds: Dataset, plan: BatchPlan, epoch: int = 0) -> list[np.ndarray]:
    n = len(ds)
    if plan.batch_size <= 0:
        raise UsageError("batch_size must be positive")
    if plan.batch_size > n:
        raise UsageError(f"batch_size {plan.batch_size} exceeds dataset size {n}")
    order = plan.order(n, epoch)
    return [order[s : s + plan.batch_size] for s in range(0, n - plan.batch_size + 1, plan.batch_size)]


def load_dataset(kind: str, train_images: Optional[str] = None, train_labels: Optional[str] = None,
                 test_images: Optional[str] = None, test_labels: Optional[str] = None,
                 cifar_train: Optional[list] = None, cifar_test: Optional[list] = None,
                 subset: int = 0, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Train/test pair for ``kind`` in {"mnist5k", "idx", "cifar10"}."""
    if kind == "mnist5k":
        train, test = load_mnist5k("train"), load_mnist5k("test")
    elif kind == "idx":
        if not (train_images and test_images):
            raise DataError("idx needs data.train_images and data.test_images paths")
        train = parse_idx(train_images, train_labels)
        test = parse_idx(test_images, test_labels)
    elif kind == "cifar10":
        if not cifar_train or not cifar_test:
            raise DataError("cifar10 needs data.cifar_train and data.cifar_test paths")
        train = parse_cifar_binary(cifar_train)
        test = parse_cifar_binary(cifar_test)
    else:
        raise DataError(f"unknown dataset kind {kind!r}")
    if subset:
        train = stratified_subset(train, subset, seed)
    return train, test
