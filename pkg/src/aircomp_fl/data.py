from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import numpy.typing as npt

from aircomp_fl.core import PartitionMode
from aircomp_fl.errors import (
    BadMagicError,
    DataError,
    DimensionOverflowError,
    IdxParseError,
    TruncatedPayloadError,
)
from aircomp_fl.learning import Dataset

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
IDX_DIMS = {IDX_IMAGES_MAGIC: 3, IDX_LABELS_MAGIC: 1}
# payloads are addressed with signed 32-bit sizes
IDX_MAX_ELEMENTS = 2**31 - 1

NUM_CLASSES = 10
IMAGE_PIXELS = 784


@dataclass(frozen=True)
class SyntheticRegressionSpec:
    """y = slope * x + intercept + noise_scale * n, x ~ U[x_range], n ~ N(0, 1)."""

    slope: float = -2.0
    intercept: float = 1.0
    noise_scale: float = 0.4
    x_range: tuple[float, float] = (0.0, 1.0)
    samples_per_worker: tuple[int, int] = (20, 60)

    def __post_init__(self) -> None:
        low, high = self.samples_per_worker
        if self.noise_scale < 0:
            raise DataError("noise_scale must be nonnegative")
        if low <= 0 or high < low or self.x_range[1] < self.x_range[0]:
            raise DataError("Synthetic regression ranges must be nonempty")

    def draw(self, n: int, stream: np.random.Generator) -> Dataset:
        x = stream.uniform(self.x_range[0], self.x_range[1], size=n)
        noise = stream.standard_normal(n)
        y = self.slope * x + self.intercept + self.noise_scale * noise
        return Dataset(x[:, None], y[:, None])


def gen_synthetic(
    spec: SyntheticRegressionSpec, num_workers: int, stream: np.random.Generator
) -> list[Dataset]:
    low, high = spec.samples_per_worker
    counts = stream.integers(low, high + 1, size=num_workers)
    return [spec.draw(int(k), stream) for k in counts]


@dataclass(frozen=True)
class IdxFile:
    magic: int
    dims: tuple[int, ...]
    payload: bytes

    def to_array(self) -> npt.NDArray[np.uint8]:
        return np.frombuffer(self.payload, dtype=np.uint8).reshape(self.dims)

    def to_bytes(self) -> bytes:
        header = struct.pack(f">I{len(self.dims)}I", self.magic, *self.dims)
        return header + self.payload


def parse_idx(raw: bytes) -> IdxFile:
    """Parse an unsigned-byte IDX container (big-endian header)."""
    if len(raw) < 4:
        raise TruncatedPayloadError(f"IDX header needs 4 bytes, got {len(raw)}")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in IDX_DIMS:
        raise BadMagicError(f"Unsupported IDX magic number 0x{magic:08x}")
    ndim = IDX_DIMS[magic]
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise TruncatedPayloadError(
            f"IDX header declares {ndim} dimensions but the file has "
            f"{len(raw)} bytes"
        )
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    elements = 1
    for size in dims:
        elements *= size
        if elements > IDX_MAX_ELEMENTS:
            raise DimensionOverflowError(f"IDX dimensions {dims} overflow the payload size")
    payload = raw[header_len:]
    if len(payload) < elements:
        raise TruncatedPayloadError(
            f"IDX payload has {len(payload)} bytes, header declares {elements}"
        )
    if len(payload) > elements:
        raise IdxParseError(
            f"IDX payload has {len(payload) - elements} trailing bytes"
        )
    return IdxFile(magic, tuple(dims), payload)


def load_idx(path: Path | str) -> IdxFile:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DataError(f"Cannot read IDX file {path}: {e}") from e
    try:
        idx = parse_idx(raw)
    except IdxParseError as e:
        raise type(e)(f"{path}: {e}") from e
    logger.debug("Loaded IDX %s with dims %s", path, idx.dims)
    return idx


def write_idx(idx: IdxFile, path: Path | str) -> None:
    Path(path).write_bytes(idx.to_bytes())


class MnistArrays(NamedTuple):
    images: npt.NDArray[np.uint8]  # (N, 784)
    labels: npt.NDArray[np.uint8]  # (N,)


def load_mnist(images_path: Path | str, labels_path: Path | str) -> MnistArrays:
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.magic != IDX_IMAGES_MAGIC or labels.magic != IDX_LABELS_MAGIC:
        raise DataError("Expected an image file and a label file, in that order")
    pixels = images.to_array().reshape(images.dims[0], -1)
    targets = labels.to_array()
    if pixels.shape[0] != targets.shape[0]:
        raise DataError(
            f"{pixels.shape[0]} images but {targets.shape[0]} labels"
        )
    return MnistArrays(pixels, targets)


def to_dataset(images: npt.ArrayLike, labels: npt.ArrayLike) -> Dataset:
    """Scale pixels to [0, 1] and one-hot encode labels."""
    pixels = np.asarray(images, dtype=np.float64) / 255.0
    classes = np.asarray(labels, dtype=np.int64)
    return Dataset(pixels, np.eye(NUM_CLASSES)[classes])


@dataclass(frozen=True)
class Partition:
    assignment: list[npt.NDArray[np.int64]]

    @property
    def sample_counts(self) -> list[int]:
        return [int(a.size) for a in self.assignment]

    @property
    def total(self) -> int:
        return sum(self.sample_counts)


def even_split(indices: npt.NDArray[np.int64], num_workers: int) -> list[npt.NDArray[np.int64]]:
    """Equal shares, the first N mod U workers taking one extra sample each."""
    base, extra = divmod(indices.size, num_workers)
    bounds = np.cumsum([0] + [base + (1 if i < extra else 0) for i in range(num_workers)])
    return [indices[bounds[i] : bounds[i + 1]] for i in range(num_workers)]


def partition_mnist(
    images: npt.ArrayLike,
    labels: npt.ArrayLike,
    num_workers: int,
    total_range: tuple[int, int],
    stream: np.random.Generator,
    mode: PartitionMode = "pooled",
) -> tuple[Partition, list[Dataset]]:
    """Draw N in total_range samples without replacement and deal them out.

    In "per_worker" mode the range applies to each worker's share instead."""
    pixels = np.asarray(images)
    classes = np.asarray(labels)
    if pixels.shape[0] != classes.shape[0]:
        raise DataError(f"{pixels.shape[0]} images but {classes.shape[0]} labels")
    low, high = total_range
    available = pixels.shape[0]

    if mode == "pooled":
        total = int(stream.integers(low, high + 1))
        if total > available:
            raise DataError(f"Cannot draw {total} samples from {available}")
        chosen = stream.choice(available, size=total, replace=False).astype(np.int64)
        assignment = even_split(chosen, num_workers)
    elif mode == "per_worker":
        counts = stream.integers(low, high + 1, size=num_workers)
        if counts.sum() > available:
            raise DataError(f"Cannot draw {counts.sum()} samples from {available}")
        chosen = stream.choice(available, size=int(counts.sum()), replace=False)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        assignment = [
            chosen[bounds[i] : bounds[i + 1]].astype(np.int64) for i in range(num_workers)
        ]
    else:
        raise DataError(f"Unknown partition mode {mode!r}")

    partition = Partition(assignment)
    datasets = [to_dataset(pixels[idx], classes[idx]) for idx in assignment]
    logger.debug(
        "Partitioned %d samples over %d workers", partition.total, num_workers
    )
    return partition, datasets


def gen_synthetic_digits(
    n: int, stream: np.random.Generator, noise_scale: float = 0.25
) -> MnistArrays:
    """MNIST-shaped stand-in data: one random binary template per class plus
    Gaussian pixel noise, quantised to bytes.

    The templates come first from the stream, so two calls on equal streams
    share them."""
    templates = (stream.random((NUM_CLASSES, IMAGE_PIXELS)) < 0.2).astype(np.float64)
    labels = stream.integers(0, NUM_CLASSES, size=n)
    pixels = templates[labels] + noise_scale * stream.standard_normal((n, IMAGE_PIXELS))
    images = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    return MnistArrays(images, labels.astype(np.uint8))


def split_arrays(arrays: MnistArrays, first: int) -> tuple[MnistArrays, MnistArrays]:
    return (
        MnistArrays(arrays.images[:first], arrays.labels[:first]),
        MnistArrays(arrays.images[first:], arrays.labels[first:]),
    )

