"""Datasets, splits, mini-batch streams and the meta-training task distribution."""
from __future__ import annotations

import gzip
import itertools
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, FormatError
from .model import ArchitectureConfig, DataBatch

DEFAULT_CHANNELS = (4, 8, 16)
DEFAULT_DEPTHS = (1, 2, 3, 4, 5)
DEFAULT_RESIDUAL = (False, True)


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int  # 0 for regression
    provenance: str = ""

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ConfigurationError("inputs and labels differ in length")

    @property
    def n(self):
        return len(self.inputs)

    def subset(self, idx, provenance=None):
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes,
                       provenance or self.provenance)

    def full_batch(self):
        return DataBatch(self.inputs, self.labels, self.n)


# -- synthetic generators ---------------------------------------------------


def blob_centers(num_classes, dim, separation, seed):
    """Class means for :func:`gen_blobs`.

    Centres sit on a circle of radius ``separation / 2`` in the first two
    coordinates (on +-separation/2 when ``dim == 1``), so for two classes
    the means are exactly ``separation`` apart.  For ``dim >= 2`` a random
    rotation drawn from ``seed`` orients the configuration.
    """
    if dim == 1:
        if num_classes > 2:
            raise ConfigurationError("1-D blobs support at most two classes")
        return np.array([[separation / 2], [-separation / 2]])[:num_classes]
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    centers = np.zeros((num_classes, dim))
    centers[:, 0] = np.cos(angles)
    centers[:, 1] = np.sin(angles)
    centers *= separation / 2
    q, r = np.linalg.qr(np.random.default_rng(seed).normal(size=(dim, dim)))
    q *= np.sign(np.diag(r))
    return centers @ q.T


def gen_blobs(num_classes, n, dim, separation, seed):
    """Isotropic unit-variance Gaussian clusters with balanced labels."""
    if n < num_classes:
        raise ConfigurationError("need at least one point per class")
    rng = np.random.default_rng(seed)
    centers = blob_centers(num_classes, dim, separation, seed)
    labels = rng.permutation(np.arange(n) % num_classes)
    inputs = centers[labels] + rng.normal(size=(n, dim))
    return Dataset(inputs, labels, num_classes, f"blobs(k={num_classes},dim={dim},sep={separation})")


def gen_sine_regression(seed, n=1000, intervals=((-5.0, 1.0), (1.0, 4.0))):
    """Noiseless ``y = sin(x)`` with ``x`` uniform over a union of intervals.

    Points are allotted to intervals in proportion to their length.
    """
    rng = np.random.default_rng(seed)
    lo = np.array([a for a, _ in intervals], dtype=float)
    hi = np.array([b for _, b in intervals], dtype=float)
    if np.any(hi <= lo):
        raise ConfigurationError("every interval needs lo < hi")
    which = rng.choice(len(intervals), size=n, p=(hi - lo) / (hi - lo).sum())
    x = rng.uniform(lo[which], hi[which])
    return Dataset(x.reshape(-1, 1), np.sin(x), 0, f"sine{tuple(map(tuple, intervals))}")


# -- IDX files ----------------------------------------------------------------

IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def _open(path, mode):
    return gzip.open(path, mode) if str(path).endswith(".gz") else open(path, mode)


def read_idx(path):
    """Parse an IDX file into an ndarray (raw values, native byte order)."""
    with _open(path, "rb") as f:
        data = f.read()
    if len(data) < 4:
        raise FormatError("file shorter than IDX magic", offset=len(data))
    if data[0] != 0 or data[1] != 0:
        raise FormatError(f"bad IDX magic {data[:4].hex()}", offset=0)
    code, rank = data[2], data[3]
    if code not in IDX_TYPES:
        raise FormatError(f"unknown IDX element type 0x{code:02x}", offset=2)
    header_end = 4 + 4 * rank
    if len(data) < header_end:
        raise FormatError("truncated IDX dimension header", offset=len(data))
    dims = struct.unpack(f">{rank}I", data[4:header_end])
    dtype = IDX_TYPES[code]
    need = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(data) - header_end < need:
        raise FormatError(f"truncated IDX payload: need {need} bytes, have {len(data) - header_end}",
                          offset=len(data))
    arr = np.frombuffer(data, dtype=dtype, count=need // dtype.itemsize, offset=header_end)
    return arr.reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array):
    array = np.asarray(array)
    for code, dtype in IDX_TYPES.items():
        if dtype.kind == array.dtype.kind and dtype.itemsize == array.dtype.itemsize:
            break
    else:
        raise FormatError(f"dtype {array.dtype} has no IDX encoding")
    with _open(path, "wb") as f:
        f.write(bytes([0, 0, code, array.ndim]))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.astype(dtype).tobytes())


def load_idx(images_path, labels_path=None, num_classes=None):
    """Load an IDX image file (and optional label file) as a :class:`Dataset`.

    Unsigned-byte images are scaled to [0, 1].  Without a label file only the
    raw array is meaningful; labels are then all zero.
    """
    images = read_idx(images_path)
    if images.dtype == np.uint8 and images.ndim >= 2:
        images = images.astype(float) / 255.0
    else:
        images = images.astype(float)
    if labels_path is None:
        labels = np.zeros(len(images), dtype=int)
    else:
        labels = read_idx(labels_path).astype(int)
        if len(labels) != len(images):
            raise FormatError(f"{len(images)} images but {len(labels)} labels")
    k = int(num_classes) if num_classes is not None else int(labels.max()) + 1
    return Dataset(images, labels, k, f"idx:{images_path}")


# -- splits and batches ---------------------------------------------------------


def split_dataset(ds, val_fraction, seed):
    if not 0 < val_fraction < 1:
        raise ConfigurationError("val_fraction must lie in (0, 1)")
    n_val = int(round(ds.n * val_fraction))
    if n_val == 0 or n_val == ds.n:
        raise ConfigurationError(f"split of {ds.n} points at {val_fraction} leaves an empty side")
    perm = np.random.default_rng(seed).permutation(ds.n)
    return ds.subset(np.sort(perm[n_val:])), ds.subset(np.sort(perm[:n_val]))


def batch_iterator(ds, batch_size, seed):
    """Endless stream of mini-batches, reshuffled every epoch.

    A trailing partial batch is dropped so every batch has ``batch_size``
    rows and the n/|B| factor stays fixed.
    """
    if not 0 < batch_size <= ds.n:
        raise ConfigurationError(f"batch size {batch_size} not in [1, {ds.n}]")
    return _batches(ds, batch_size, np.random.default_rng(seed))


def _batches(ds, batch_size, rng):
    per_epoch = ds.n // batch_size
    while True:
        perm = rng.permutation(ds.n)
        for b in range(per_epoch):
            idx = perm[b * batch_size:(b + 1) * batch_size]
            yield DataBatch(ds.inputs[idx], ds.labels[idx], ds.n)


# -- task distribution -------------------------------------------------------


@dataclass(frozen=True)
class DatasetSpec:
    """A recipe for a dataset; regenerated with a fresh seed for every task."""

    kind: str  # "blobs" | "sine" | "idx"
    num_classes: int = 2
    n: int = 300
    dim: int = 2
    separation: float = 3.0
    images_path: str = ""
    labels_path: str = ""
    intervals: tuple = ((-5.0, 1.0), (1.0, 4.0))

    def build(self, seed):
        if self.kind == "blobs":
            return gen_blobs(self.num_classes, self.n, self.dim, self.separation, seed)
        if self.kind == "sine":
            return gen_sine_regression(seed, n=self.n, intervals=self.intervals)
        if self.kind == "idx":
            ds = load_idx(self.images_path, self.labels_path or None)
            if self.n and self.n < ds.n:
                ds = ds.subset(np.sort(np.random.default_rng(seed).choice(ds.n, self.n, replace=False)))
            return ds
        raise ConfigurationError(f"unknown dataset kind {self.kind!r}")


@dataclass
class Task:
    train: Dataset
    val: Dataset
    arch: ArchitectureConfig
    task_id: str
    prior_precision: float = 5e-4
    batch_size: int = 32


@dataclass
class TaskDistribution:
    """Uniform distribution over datasets crossed with architecture options.

    Image datasets get ``conv_depth`` convolutions of ``channels`` filters.
    Vector datasets get an MLP with ``depth`` hidden layers of width
    ``channels``, the dense analogue used when IDX files are unavailable.
    """

    datasets: list
    channels: tuple = DEFAULT_CHANNELS
    depths: tuple = DEFAULT_DEPTHS
    residual: tuple = DEFAULT_RESIDUAL
    val_fraction: float = 0.3
    prior_precision: float = 5e-4
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.datasets:
            raise ConfigurationError("task distribution needs at least one dataset")

    def options(self):
        return list(itertools.product(range(len(self.datasets)), self.channels, self.depths, self.residual))

    def sample(self, rng):
        return sample_task(self, rng)


def make_arch(train, channels, depth, residual):
    x = train.inputs
    if train.num_classes == 0:
        widths = (x.shape[1],) + (channels,) * depth + (1,)
        return ArchitectureConfig.mlp(widths, residual=residual, likelihood="gaussian")
    if x.ndim >= 3:
        return ArchitectureConfig.conv(x.shape[1:], channels, depth, train.num_classes, residual=residual)
    widths = (x.shape[1],) + (channels,) * depth + (train.num_classes,)
    return ArchitectureConfig.mlp(widths, residual=residual)


def sample_task(dist, rng):
    """Draw a dataset and an architecture uniformly at random."""
    ds_index = int(rng.integers(len(dist.datasets)))
    channels = dist.channels[int(rng.integers(len(dist.channels)))]
    depth = dist.depths[int(rng.integers(len(dist.depths)))]
    residual = bool(dist.residual[int(rng.integers(len(dist.residual)))])
    data_seed = int(rng.integers(2**31))
    spec = dist.datasets[ds_index]
    ds = spec.build(data_seed)
    train, val = split_dataset(ds, dist.val_fraction, data_seed + 1)
    arch = make_arch(train, channels, depth, residual)
    task_id = f"{ds_index}:{spec.kind}:c{channels}:d{depth}:r{int(residual)}:s{data_seed}"
    return Task(train, val, arch, task_id, dist.prior_precision, min(dist.batch_size, train.n))
