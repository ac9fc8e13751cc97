"""Character corpora and fixed-shape feature datasets.

QFD files (little-endian)::

    b"QFD1"  u32 n_samples  u32 rows  u32 cols  u32 n_labels
    per sample: u32 label, rows*cols float32 (row-major)

A feature matrix is rows = feature dimensions by cols = frames. Padding is
leading (zero columns on the left); on load, leading columns that are zero
in every row are treated as padding.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .tensor import DataError, ParameterError, RandomSource

QFD_MAGIC = b"QFD1"
STD_FLOOR = 1e-8


class FormatError(ValueError):
    """A dataset file does not follow its declared format."""


@dataclass(frozen=True)
class CharCorpus:
    alphabet: bytes
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    seq_len: int

    @property
    def vocab_size(self) -> int:
        return len(self.alphabet)

    def train_chunks(self) -> np.ndarray:
        """Training split cut into ``seq_len`` pieces; the tail is dropped."""
        n = len(self.train) // self.seq_len
        return self.train[: n * self.seq_len].reshape(n, self.seq_len)

    def eval_chunks(self, split: str) -> list[np.ndarray]:
        """All characters of a split in ``seq_len`` pieces (last may be shorter)."""
        data = getattr(self, split)
        return [data[i : i + self.seq_len] for i in range(0, len(data), self.seq_len)]


def encode_text(data: bytes, alphabet: bytes) -> np.ndarray:
    table = np.full(256, -1, dtype=np.int64)
    table[np.frombuffer(alphabet, dtype=np.uint8)] = np.arange(len(alphabet))
    idx = table[np.frombuffer(data, dtype=np.uint8)]
    if (idx < 0).any():
        raise DataError("text contains symbols outside the alphabet")
    return idx


def build_alphabet(data: bytes) -> bytes:
    """Distinct byte values in order of first appearance."""
    raw = np.frombuffer(data, dtype=np.uint8)
    values, first = np.unique(raw, return_index=True)
    return bytes(values[np.argsort(first)].tolist())


def load_char_corpus(path, fractions=(0.9, 0.05, 0.05), seq_len: int = 50, max_chars: int | None = None, alphabet: bytes | None = None) -> CharCorpus:
    """Read a byte corpus and split it contiguously into train/valid/test."""
    if len(fractions) != 3 or min(fractions) <= 0 or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ParameterError(f"split fractions must be three positive numbers summing to 1, got {fractions}")
    if seq_len < 1:
        raise ParameterError("seq_len must be >= 1")
    data = Path(path).read_bytes()
    if max_chars is not None:
        data = data[:max_chars]
    if not data:
        raise OSError(f"{path}: corpus is empty")
    alphabet = build_alphabet(data) if alphabet is None else alphabet
    idx = encode_text(data, alphabet)
    n = len(idx)
    n_train = round(n * fractions[0])
    n_valid_end = round(n * (fractions[0] + fractions[1]))
    return CharCorpus(alphabet, idx[:n_train], idx[n_train:n_valid_end], idx[n_valid_end:], seq_len)


@dataclass(frozen=True)
class FeatureDataset:
    features: np.ndarray  # N x rows x cols
    labels: np.ndarray
    n_labels: int
    frames: np.ndarray  # real (non-padding) frames per sample, right-aligned
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        if self.features.ndim != 3:
            raise DataError(f"features must be N x rows x cols, got {self.features.shape}")
        if len(self.labels) != len(self.features):
            raise DataError("one label per sample required")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_labels):
            raise DataError(f"labels must lie in [0, {self.n_labels})")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int]:
        return self.features.shape[1:]

    def sequences(self) -> np.ndarray:
        """Model input: N x frames x feature-dims."""
        return np.ascontiguousarray(self.features.transpose(0, 2, 1))

    def real_mask(self) -> np.ndarray:
        cols = self.features.shape[2]
        return np.arange(cols)[None, :] >= (cols - self.frames)[:, None]


def _leading_zero_frames(features: np.ndarray) -> np.ndarray:
    silent = np.all(features == 0, axis=1)  # N x cols
    return np.where(silent.all(axis=1), silent.shape[1], np.argmin(silent, axis=1))


def make_dataset(features, labels, n_labels: int) -> FeatureDataset:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    frames = features.shape[2] - _leading_zero_frames(features)
    return FeatureDataset(features, labels, int(n_labels), frames)


def write_feature_dataset(ds: FeatureDataset, path) -> None:
    n, rows, cols = ds.features.shape
    body = np.empty((n, 1 + rows * cols), dtype="<u4")
    body[:, 0] = ds.labels
    body[:, 1:] = ds.features.astype("<f4").reshape(n, -1).view("<u4")
    header = QFD_MAGIC + struct.pack("<IIII", n, rows, cols, ds.n_labels)
    Path(path).write_bytes(header + body.tobytes())


def load_feature_dataset(path) -> FeatureDataset:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:4] != QFD_MAGIC:
        raise FormatError(f"{path}: not a QFD1 file")
    n, rows, cols, n_labels = struct.unpack("<IIII", data[4:20])
    expected = 20 + n * 4 * (1 + rows * cols)
    if len(data) != expected:
        raise FormatError(f"{path}: header promises {expected} bytes, file has {len(data)}")
    body = np.frombuffer(data, dtype="<u4", offset=20).reshape(n, 1 + rows * cols)
    labels = body[:, 0].astype(np.int64)
    features = body[:, 1:].copy().view("<f4").astype(np.float64).reshape(n, rows, cols)
    try:
        return make_dataset(features, labels, n_labels)
    except DataError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def whitening_stats(ds: FeatureDataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and (population) std over real frames only."""
    mask = ds.real_mask()[:, None, :]
    count = mask.sum() if mask.any() else 1
    total = np.where(mask, ds.features, 0.0).sum(axis=(0, 2))
    mean = total / count
    var = np.where(mask, (ds.features - mean[None, :, None]) ** 2, 0.0).sum(axis=(0, 2)) / count
    return mean, np.maximum(np.sqrt(var), STD_FLOOR)


def pad_and_whiten(ds: FeatureDataset, rows: int, cols: int, stats=None) -> FeatureDataset:
    """Left-pad every sample to ``rows x cols`` frames and z-score each dimension.

    Statistics come from ``ds`` itself (the training split) unless ``stats``
    = (mean, std) from a training split is supplied. Padding stays zero.
    """
    n, r, c = ds.features.shape
    if r != rows:
        raise DataError(f"samples have {r} feature dimensions, target has {rows}")
    if c > cols:
        raise DataError(f"sample width {c} exceeds target width {cols}")
    padded = np.zeros((n, rows, cols))
    padded[:, :, cols - c :] = ds.features
    out = replace(ds, features=padded)
    mean, std = whitening_stats(out) if stats is None else stats
    mask = out.real_mask()[:, None, :]
    white = np.where(mask, (padded - mean[None, :, None]) / std[None, :, None], 0.0)
    return replace(out, features=white, mean=mean, std=std)


def make_synthetic_digits(
    rng: RandomSource,
    n_per_class: int,
    n_classes: int = 10,
    shape=(39, 200),
    template_seed: int = 2016,
    profile_scale: float = 0.3,
    modulation: float = 0.5,
    noise: float = 1.0,
) -> FeatureDataset:
    """Class-conditional feature sequences standing in for spoken digits.

    Each class has a fixed spectral profile and a slow modulation pattern
    (drawn from ``template_seed``, so different ``rng`` seeds give train and
    validation splits of the same task). Samples vary in length, carry
    leading zero padding, and get per-frame Gaussian noise. Values are
    rounded to float32 so a QFD round trip is exact.
    """
    if n_per_class < 1:
        raise ParameterError("n_per_class must be >= 1")
    rows, cols = shape
    tmpl = RandomSource(template_seed)
    profile = tmpl.normal((n_classes, rows))
    freq = 1.0 + 3.0 * tmpl.random(n_classes)
    phase = 2.0 * math.pi * tmpl.random((n_classes, rows))

    labels = np.repeat(np.arange(n_classes), n_per_class)[rng.permutation(n_classes * n_per_class)]
    lengths = cols // 2 + np.floor(rng.random(len(labels)) * (cols - cols // 2 + 1)).astype(np.int64)
    features = np.zeros((len(labels), rows, cols))
    for i, (label, length) in enumerate(zip(labels, lengths)):
        t = np.arange(length) / length
        wave = np.sin(2.0 * math.pi * freq[label] * t[None, :] + phase[label][:, None])
        signal = profile_scale * profile[label][:, None] + modulation * wave
        features[i, :, cols - length :] = signal + noise * rng.normal((rows, length))
    features = features.astype(np.float32).astype(np.float64)
    return make_dataset(features, labels, n_classes)
