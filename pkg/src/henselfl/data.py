"""MNIST ingestion and the two-layer privacy pipeline.

Per image: bytes / 255 -> quantize to base p -> block-pack -> divide by
``p**B - 1`` -> add Gaussian noise from a stream keyed by the image index.
"""

import gzip
import json
import os
import struct
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_image_batch, check_unit_interval
from .exceptions import DomainError, FormatError, LengthError, ShapeError
from .hensel import CompressionConfig, PackedMatrix, compress_batch
from .privacy import STREAM_TRAIN_NOISE, GaussianStream, PrivacyParams, add_noise

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
N_CLASSES = 10

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _read_header(data, magic, n_dims):
    data = bytes(data)
    size = 4 * (1 + n_dims)
    if len(data) < size:
        raise LengthError(f"IDX header needs {size} bytes, got {len(data)}")
    found, *dims = struct.unpack(f">{1 + n_dims}I", data[:size])
    if found != magic:
        raise FormatError(f"bad IDX magic {found}, expected {magic}")
    expected = size + int(np.prod(dims, dtype=np.int64))
    if len(data) < expected:
        raise LengthError(f"IDX payload truncated: need {expected} bytes, got {len(data)}")
    if len(data) > expected:
        warnings.warn(f"ignoring {len(data) - expected} trailing bytes after IDX payload", stacklevel=3)
    return data, dims, size


def parse_idx_images(data):
    """Parse an IDX3 image stream into a ``(count, rows, cols)`` uint8 array."""
    data, (count, rows, cols), offset = _read_header(data, IDX_IMAGES_MAGIC, 3)
    pixels = np.frombuffer(data, dtype=np.uint8, count=count * rows * cols, offset=offset)
    return pixels.reshape(count, rows, cols).copy()


def parse_idx_labels(data):
    data, (count,), offset = _read_header(data, IDX_LABELS_MAGIC, 1)
    labels = np.frombuffer(data, dtype=np.uint8, count=count, offset=offset).copy()
    if labels.size and labels.max() >= N_CLASSES:
        i = int(np.argmax(labels >= N_CLASSES))
        raise DomainError(f"label {labels[i]} at position {i} is outside [0, {N_CLASSES})")
    return labels


def read_idx_file(path):
    """Read raw bytes from ``path``, transparently un-gzipping ``.gz`` files."""
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _resolve(data_dir, name):
    for candidate in (Path(data_dir) / name, Path(data_dir) / f"{name}.gz"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"MNIST file not found: {Path(data_dir) / name}[.gz]")


@dataclass
class RawDataset:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = check_image_batch(self.images, "images")
        self.labels = np.asarray(self.labels)
        if len(self.images) != len(self.labels):
            raise ShapeError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, indices):
        return RawDataset(self.images[indices], self.labels[indices])


def load_mnist(data_dir, split="train", limit=None):
    images_name, labels_name = MNIST_FILES[split]
    images = parse_idx_images(read_idx_file(_resolve(data_dir, images_name)))
    labels = parse_idx_labels(read_idx_file(_resolve(data_dir, labels_name)))
    raw = RawDataset(images, labels)
    if limit is not None:
        raw = raw.subset(slice(0, limit))
    return raw


def quantize(M, p):
    """Map values in [0, 1] to digits ``round(x * (p - 1))``, ties rounded up."""
    M = check_unit_interval(M)
    if int(p) < 2:
        raise DomainError(f"p must be >= 2, got {p}")
    return np.floor(M * (p - 1) + 0.5).astype(np.int64)


def dequantize(D, p):
    return np.asarray(D, dtype=np.float64) / (p - 1)


def normalize_packed(packed, config=None):
    """Scale packed values into [0, 1] by dividing by ``p**B - 1``.

    Accepts a :class:`PackedMatrix` or a raw array plus its config.  uint64
    values are divided in extended precision before rounding to float64;
    wider values are divided exactly.
    """
    if isinstance(packed, PackedMatrix):
        values, config = packed.values, packed.config
    else:
        values = np.asarray(packed)
    top = config.capacity - 1
    if values.dtype == object:
        flat = [float(Fraction(int(v), top)) for v in values.ravel()]
        return np.array(flat, dtype=np.float64).reshape(values.shape)
    return (values.astype(np.longdouble) / np.longdouble(top)).astype(np.float64)


def compress_normalize(images, compression):
    """Bytes -> [0, 1] -> digits -> packed -> normalized reals, without noise."""
    scaled = check_image_batch(images).astype(np.float64) / 255.0
    digits = quantize(scaled, compression.base)
    return normalize_packed(compress_batch(digits, compression), compression)


@dataclass(frozen=True)
class PipelineConfig:
    """What ``prepare_private_dataset`` needs: block packing plus privacy settings."""

    compression: CompressionConfig
    epsilon: float
    sensitivity: float = 1.0
    seed: int = 0

    def privacy(self):
        return PrivacyParams(self.epsilon, self.sensitivity, self.seed)


def _pipeline(config):
    return config if isinstance(config, PipelineConfig) else config.pipeline()


@dataclass
class PrivateDataset:
    images: np.ndarray
    labels: np.ndarray
    provenance: dict = field(default_factory=dict)
    noise_draws: int = 0

    def __len__(self):
        return len(self.labels)

    @property
    def side(self):
        return self.images.shape[1]


def prepare_private_dataset(raw, config, stream=STREAM_TRAIN_NOISE, indices=None):
    """Run the full compress-then-noise pipeline once over ``raw``.

    ``indices`` are the dataset-wide positions of ``raw``'s images (defaults
    to ``0..len-1``); image ``i`` draws noise from stream
    ``(seed, stream, indices[i])`` so a shard noised on its own matches the
    same images noised as part of the whole set.
    """
    pipe = _pipeline(config)
    params = pipe.privacy()
    features = compress_normalize(raw.images, pipe.compression)
    if indices is None:
        indices = np.arange(len(raw))
    indices = np.asarray(indices)
    if len(indices) != len(raw):
        raise ShapeError(f"{len(indices)} indices for {len(raw)} images")
    noisy = np.empty_like(features)
    draws = 0
    for i, (image, index) in enumerate(zip(features, indices)):
        rng = GaussianStream(params.seed, stream, int(index))
        noisy[i] = add_noise(image, params, rng)
        draws += rng.draws
    provenance = {
        "base": pipe.compression.base,
        "block_shape": [pipe.compression.block_rows, pipe.compression.block_cols],
        "epsilon": pipe.epsilon,
        "sensitivity": pipe.sensitivity,
        "seed": pipe.seed,
        "stream": stream,
    }
    return PrivateDataset(noisy, np.array(raw.labels, copy=True), provenance, draws)


def prepare_compressed_dataset(raw, config):
    """Compress and normalize ``raw`` without adding noise (``noise_draws`` is 0)."""
    pipe = _pipeline(config)
    features = compress_normalize(raw.images, pipe.compression)
    provenance = {
        "base": pipe.compression.base,
        "block_shape": [pipe.compression.block_rows, pipe.compression.block_cols],
        "epsilon": None,
    }
    return PrivateDataset(features, np.array(raw.labels, copy=True), provenance, 0)


def save_private_dataset(dataset, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(
        tmp,
        images=dataset.images,
        labels=dataset.labels,
        noise_draws=np.int64(dataset.noise_draws),
        provenance=np.array(json.dumps(dataset.provenance, sort_keys=True)),
    )
    os.replace(tmp, path)


def load_private_dataset(path):
    with np.load(path, allow_pickle=False) as f:
        return PrivateDataset(
            f["images"], f["labels"], json.loads(str(f["provenance"])), int(f["noise_draws"])
        )


def dump_image(M, path, value_range=None):
    """Write ``M`` as a binary (P5) PGM.

    Values are mapped affinely from ``value_range`` (default: the matrix's own
    min and max) onto 0..255 and clipped.  A constant matrix becomes mid-gray.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {M.shape}")
    lo, hi = value_range if value_range is not None else (M.min(), M.max())
    if hi > lo:
        pixels = np.clip(np.floor((M - lo) / (hi - lo) * 255.0 + 0.5), 0, 255).astype(np.uint8)
    else:
        pixels = np.full(M.shape, 128, dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows, cols = M.shape
    path.write_bytes(f"P5\n{cols} {rows}\n255\n".encode("ascii") + pixels.tobytes())
    return path


def read_pgm(path):
    """Parse a binary PGM written by :func:`dump_image` (no comment lines)."""
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if len(parts) < 4 or parts[0] != b"P5":
        raise FormatError(f"{path} is not a binary PGM")
    cols, rows, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError(f"unsupported PGM maxval {maxval}")
    payload = data[len(data) - rows * cols:]
    return np.frombuffer(payload, dtype=np.uint8).reshape(rows, cols).copy()


class PrivacyPreprocessor(TransformerMixin, BaseEstimator):
    """Raw 8-bit images in, compressed and noised reals out.

    Stateless apart from validating the input image shape seen in ``fit``.
    """

    def __init__(self, base=256, block_shape=(2, 2), epsilon=2.0, sensitivity=1.0,
                 random_state=0, stream=STREAM_TRAIN_NOISE):
        self.base = base
        self.block_shape = block_shape
        self.epsilon = epsilon
        self.sensitivity = sensitivity
        self.random_state = random_state
        self.stream = stream

    def _config(self):
        compression = CompressionConfig(self.base, *self.block_shape)
        return PipelineConfig(compression, self.epsilon, self.sensitivity, self.random_state)

    def fit(self, X, y=None):
        X = check_image_batch(X)
        self.config_ = self._config()
        self.output_shape_ = self.config_.compression.reduced_shape(*X.shape[1:])
        return self

    def transform(self, X):
        X = check_image_batch(X)
        labels = np.zeros(len(X), dtype=np.int64)
        return prepare_private_dataset(RawDataset(X, labels), self._config(), self.stream).images

    def get_feature_names_out(self, input_features=None):
        h, k = self.output_shape_
        return np.array([f"block_{i}_{j}" for i in range(h) for j in range(k)], dtype=object)
