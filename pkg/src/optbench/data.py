"""Datasets: download, verification, parsing, splitting and batching.

Cache layout::

    <cache_dir>/<dataset>/<file name>
    <cache_dir>/<dataset>/CHECKSUMS      # lines "sha256  filename"

Image tensors are NHWC float32 in [0, 1] (CIFAR-10 is additionally
standardized per channel).  Labels are int64.
"""

from __future__ import annotations

import gzip
import hashlib
import io
import logging
import os
import struct
import tarfile
import tempfile
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
from filelock import FileLock

from .rng import generator

logger = logging.getLogger(__name__)

DATASET_IDS = ("mnist", "fmnist", "cifar10", "quadratic", "two_d")
SYNTHETIC = ("quadratic", "two_d")
TRAIN_EVAL_SEED = 42
CIFAR_RECORD = 1 + 32 * 32 * 3


class DataError(Exception):
    """Base class for data pipeline failures."""


class DownloadError(DataError):
    pass


class ChecksumMismatchError(DataError):
    def __init__(self, path: Path | str, expected: str, actual: str):
        self.path, self.expected, self.actual = str(path), expected, actual
        super().__init__(f"checksum mismatch for {path}: expected sha256 {expected}, got {actual}")


class FormatError(DataError):
    pass


class MissingDatasetError(DataError):
    pass


# -- remote sources ---------------------------------------------------------------

@dataclass(frozen=True)
class Source:
    """One way of obtaining every file of a dataset.

    ``kind`` is ``"files"`` (``url + name`` per file), ``"gzip"``
    (``url + name + ".gz"``, decompressed on arrival) or ``"tar"`` (a single
    archive at ``url``; ``members`` maps file name to archive member).
    """

    url: str
    kind: str = "files"
    members: dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class RemoteDataset:
    # file name -> pinned sha256 of the stored (uncompressed) file, or None
    # when the digest is recorded on first download.
    files: dict[str, str | None]
    sources: tuple[Source, ...]


_MNIST_NAMES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
_CIFAR_NAMES = tuple(f"data_batch_{i}.bin" for i in range(1, 6)) + ("test_batch.bin",)

REMOTE: dict[str, RemoteDataset] = {
    "mnist": RemoteDataset(
        files={
            "train-images-idx3-ubyte": "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
            "train-labels-idx1-ubyte": "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
            "t10k-images-idx3-ubyte": "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
            "t10k-labels-idx1-ubyte": "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
        },
        sources=(
            Source("https://ossci-datasets.s3.amazonaws.com/mnist/", "gzip"),
            Source("https://storage.googleapis.com/cvdf-datasets/mnist/", "gzip"),
            Source("https://registry.npmjs.org/mnist-data/-/mnist-data-1.2.6.tgz", "tar",
                   {n: f"package/data/{n}" for n in _MNIST_NAMES}),
        ),
    ),
    "fmnist": RemoteDataset(
        files=dict.fromkeys(_MNIST_NAMES),
        sources=(Source("http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/", "gzip"),),
    ),
    "cifar10": RemoteDataset(
        files=dict.fromkeys(_CIFAR_NAMES),
        sources=(Source("https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz", "tar",
                        {n: f"cifar-10-batches-bin/{n}" for n in _CIFAR_NAMES}),),
    ),
}


def default_cache_dir() -> Path:
    env = os.environ.get("OPTBENCH_CACHE")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "optbench"


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_checksums(path: Path) -> dict[str, str]:
    out = {}
    if path.exists():
        for line in path.read_text().splitlines():
            if line.strip():
                digest, name = line.split(None, 1)
                out[name.strip()] = digest
    return out


def _write_checksums(path: Path, digests: dict[str, str]) -> None:
    path.write_text("".join(f"{digests[n]}  {n}\n" for n in sorted(digests)))


def _urlopen(url: str) -> bytes:
    with urllib.request.urlopen(url, timeout=60) as resp:
        return resp.read()


def _download(source: Source, names: list[str], opener: Callable[[str], bytes]) -> dict[str, bytes]:
    if source.kind == "tar":
        blob = opener(source.url)
        out = {}
        with tarfile.open(fileobj=io.BytesIO(blob), mode="r:*") as tar:
            for name in names:
                member = tar.extractfile(source.members.get(name, name))
                if member is None:
                    raise DownloadError(f"{source.url}: archive member for {name} missing")
                out[name] = member.read()
        return out
    if source.kind == "gzip":
        return {n: gzip.decompress(opener(source.url + n + ".gz")) for n in names}
    if source.kind == "files":
        return {n: opener(source.url + n) for n in names}
    raise ValueError(f"unknown source kind {source.kind!r}")


def fetch(name: str, cache_dir: str | os.PathLike | None = None, *,
          remote: RemoteDataset | None = None,
          opener: Callable[[str], bytes] = _urlopen) -> list[Path]:
    """Make sure the raw files of dataset ``name`` are cached and verified.

    Idempotent: when every file is present and matches its checksum no
    network access happens.  A corrupted cached file raises
    :class:`ChecksumMismatchError` instead of being silently replaced.
    Synthetic datasets have no files and return an empty list.
    """
    if name not in DATASET_IDS:
        raise MissingDatasetError(f"unknown dataset {name!r}; valid ids: {', '.join(DATASET_IDS)}")
    if name in SYNTHETIC:
        return []
    remote = remote or REMOTE[name]
    root = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    folder = root / name
    folder.mkdir(parents=True, exist_ok=True)
    checksum_file = folder / "CHECKSUMS"

    with FileLock(str(folder / ".lock")):
        recorded = _read_checksums(checksum_file)
        expected = {n: pinned or recorded.get(n) for n, pinned in remote.files.items()}
        missing = []
        for fname, digest in expected.items():
            path = folder / fname
            if not path.exists():
                missing.append(fname)
                continue
            actual = sha256_file(path)
            if digest is None:
                recorded[fname] = actual
            elif actual != digest:
                raise ChecksumMismatchError(path, digest, actual)
        if missing:
            logger.info("fetching %s: %s", name, ", ".join(missing))
            blobs = _fetch_from_sources(name, remote, missing, expected, opener)
            for fname, blob in blobs.items():
                _atomic_write(folder / fname, blob)
                recorded[fname] = hashlib.sha256(blob).hexdigest()
        final = {n: expected[n] or recorded[n] for n in remote.files}
        if final != _read_checksums(checksum_file):
            _write_checksums(checksum_file, final)
    return [folder / n for n in remote.files]


def _fetch_from_sources(name, remote, missing, expected, opener) -> dict[str, bytes]:
    failures = []
    for source in remote.sources:
        try:
            blobs = _download(source, missing, opener)
        except (OSError, tarfile.TarError, EOFError, DownloadError) as exc:
            failures.append(f"{source.url}: {exc}")
            continue
        bad = [(n, hashlib.sha256(b).hexdigest()) for n, b in blobs.items()
               if expected[n] is not None and hashlib.sha256(b).hexdigest() != expected[n]]
        if bad:
            n, got = bad[0]
            failures.append(f"{source.url}: {ChecksumMismatchError(n, expected[n], got)}")
            continue
        return blobs
    raise DownloadError(f"could not download {name}:\n  " + "\n  ".join(failures))


def _atomic_write(path: Path, blob: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    with os.fdopen(fd, "wb") as f:
        f.write(blob)
    os.chmod(tmp, 0o644)
    os.replace(tmp, path)


# -- parsers ----------------------------------------------------------------------

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
_IDX_CODES = {(np.dtype(v).kind, np.dtype(v).itemsize): k for k, v in _IDX_TYPES.items()}


def parse_idx(data: bytes, normalize: bool | None = None) -> np.ndarray:
    """Decode an IDX file (gzip-compressed input is accepted).

    ``normalize`` scales unsigned-byte payloads to float32 in [0, 1]; by
    default this happens for rank >= 2 (images) and not for label vectors,
    which come back as int64.
    """
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    if len(data) < 4 or data[0] != 0 or data[1] != 0 or data[2] not in _IDX_TYPES:
        raise FormatError(f"bad IDX magic number {data[:4].hex() if data else '<empty>'}")
    ndim = data[3]
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"truncated IDX header: expected {header} bytes, got {len(data)}")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    dtype = np.dtype(_IDX_TYPES[data[2]])
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    actual = len(data) - header
    if actual < expected:
        raise FormatError(f"truncated IDX payload: expected {expected} bytes, got {actual}")
    arr = np.frombuffer(data, dtype=dtype, count=expected // dtype.itemsize, offset=header).reshape(dims)
    if normalize is None:
        if dtype == np.uint8 and ndim == 1:
            return arr.astype(np.int64)
        normalize = dtype == np.uint8
    if normalize:
        return arr.astype(np.float32) / np.float32(255)
    return arr.astype(dtype.newbyteorder("="))


def write_idx(arr: np.ndarray) -> bytes:
    """Encode ``arr`` as an IDX file (inverse of ``parse_idx(..., normalize=False)``)."""
    arr = np.asarray(arr)
    code = _IDX_CODES.get((arr.dtype.kind, arr.dtype.itemsize))
    if code is None:
        raise FormatError(f"dtype {arr.dtype} has no IDX encoding")
    header = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_IDX_TYPES[code]).tobytes()


def cifar_channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std of NHWC images, accumulated in float64."""
    flat = images.reshape(-1, images.shape[-1]).astype(np.float64)
    return flat.mean(axis=0), flat.std(axis=0)


def parse_cifar(data: bytes, stats: tuple[np.ndarray, np.ndarray] | None = None,
                standardize: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Decode CIFAR-10 binary records into ``(images [N,32,32,3], labels [N])``.

    Pixels are scaled to [0, 1]; with ``standardize`` each channel is then
    shifted/scaled by ``stats`` (mean, std), computed from ``data`` itself
    when not given.  Pass the training-set stats when decoding the test set.
    """
    if len(data) % CIFAR_RECORD:
        raise FormatError(f"CIFAR payload of {len(data)} bytes is not a multiple of {CIFAR_RECORD}")
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    images = raw[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).astype(np.float32) / np.float32(255)
    if standardize:
        mean, std = stats if stats is not None else cifar_channel_stats(images)
        images = ((images - mean) / std).astype(np.float32)
    return np.ascontiguousarray(images), labels


# -- datasets ---------------------------------------------------------------------

@dataclass(eq=False)
class Dataset:
    name: str
    train_inputs: np.ndarray
    train_labels: np.ndarray | None
    test_inputs: np.ndarray
    test_labels: np.ndarray | None
    num_classes: int | None = None
    train_eval_indices: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.train_eval_indices is None:
            self.train_eval_indices = default_train_eval_indices(len(self.train_inputs), len(self.test_inputs))
        for arr in (self.train_inputs, self.train_labels, self.test_inputs, self.test_labels,
                    self.train_eval_indices):
            if arr is not None:
                arr.flags.writeable = False

    @property
    def n_train(self) -> int:
        return len(self.train_inputs)

    @property
    def n_test(self) -> int:
        return len(self.test_inputs)


def default_train_eval_indices(n_train: int, n_test: int) -> np.ndarray:
    """First ``n_test`` entries of a fixed seed-42 permutation of the train set."""
    perm = generator(TRAIN_EVAL_SEED, "train_eval").permutation(n_train)
    return np.sort(perm[:min(n_test, n_train)])


def _load_idx_pair(folder: Path, prefix: str) -> tuple[np.ndarray, np.ndarray]:
    images = parse_idx((folder / f"{prefix}-images-idx3-ubyte").read_bytes())
    labels = parse_idx((folder / f"{prefix}-labels-idx1-ubyte").read_bytes())
    return images[..., None], labels


def load_mnist_like(name: str, cache_dir=None, download: bool = True) -> Dataset:
    folder = _dataset_folder(name, cache_dir, download)
    x_train, y_train = _load_idx_pair(folder, "train")
    x_test, y_test = _load_idx_pair(folder, "t10k")
    return Dataset(name, x_train, y_train, x_test, y_test, num_classes=10)


def load_cifar10(cache_dir=None, download: bool = True) -> Dataset:
    folder = _dataset_folder("cifar10", cache_dir, download)
    train_raw = b"".join((folder / f"data_batch_{i}.bin").read_bytes() for i in range(1, 6))
    x_train, y_train = parse_cifar(train_raw, standardize=False)
    stats = cifar_channel_stats(x_train)
    x_train = ((x_train - stats[0]) / stats[1]).astype(np.float32)
    x_test, y_test = parse_cifar((folder / "test_batch.bin").read_bytes(), stats=stats)
    return Dataset("cifar10", x_train, y_train, x_test, y_test, num_classes=10)


def _dataset_folder(name: str, cache_dir, download: bool) -> Path:
    root = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    folder = root / name
    if download:
        fetch(name, root)
    elif not all((folder / f).exists() for f in REMOTE[name].files):
        raise MissingDatasetError(f"dataset {name!r} not found in {root}; run `optbench fetch {name}`")
    return folder


def synthetic_quadratic(spec, split_seed: int, n_train: int = 1000, n_test: int = 1000) -> Dataset:
    """Standard normal samples in R^dimension; train and test use separate streams."""
    dim = spec.dimension
    train = generator(split_seed, "quadratic/train").standard_normal((n_train, dim)).astype(np.float32)
    test = generator(split_seed, "quadratic/test").standard_normal((n_test, dim)).astype(np.float32)
    return Dataset("quadratic", train, None, test, None)


def synthetic_noise_2d(sigma: float, split_seed: int, n_train: int = 1000, n_test: int = 1000) -> Dataset:
    """I.i.d. N(0, sigma^2 I) perturbations of a 2-D evaluation point."""
    train = (sigma * generator(split_seed, "two_d/train").standard_normal((n_train, 2))).astype(np.float32)
    test = (sigma * generator(split_seed, "two_d/test").standard_normal((n_test, 2))).astype(np.float32)
    return Dataset("two_d", train, None, test, None)


# -- batching ---------------------------------------------------------------------

@dataclass(frozen=True)
class BatchStream:
    dataset: Dataset
    batch_size: int
    epoch_seed: int

    def __post_init__(self):
        if self.batch_size <= 0:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.batch_size > self.dataset.n_train:
            raise ValueError(f"batch_size {self.batch_size} exceeds training set size {self.dataset.n_train}")

    @property
    def batches_per_epoch(self) -> int:
        return self.dataset.n_train // self.batch_size


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    return generator(seed, "batches", epoch).permutation(n)


def batches(stream: BatchStream, epoch: int) -> list[np.ndarray]:
    """Index arrays of the mini-batches of ``epoch``; the ragged tail is dropped."""
    perm = epoch_permutation(stream.epoch_seed, epoch, stream.dataset.n_train)
    b = stream.batch_size
    return [perm[i * b:(i + 1) * b] for i in range(stream.batches_per_epoch)]


@dataclass(frozen=True)
class EvalStream:
    inputs: np.ndarray
    labels: np.ndarray | None

    def __len__(self) -> int:
        return len(self.inputs)

    def chunks(self, size: int) -> Iterator[tuple[np.ndarray, np.ndarray | None]]:
        for i in range(0, len(self.inputs), size):
            yield self.inputs[i:i + size], None if self.labels is None else self.labels[i:i + size]


def train_eval_view(dataset: Dataset) -> EvalStream:
    """Unshuffled evaluation stream over the train-eval subset."""
    idx = dataset.train_eval_indices
    labels = None if dataset.train_labels is None else dataset.train_labels[idx]
    return EvalStream(dataset.train_inputs[idx], labels)


def test_view(dataset: Dataset) -> EvalStream:
    return EvalStream(dataset.test_inputs, dataset.test_labels)


test_view.__test__ = False  # not a pytest test
