"""Feature datasets: the MPFT binary file format, deterministic
batching and stratified splitting, and synthetic generators that make
the first-order/second-order distinction testable.

MPFT layout (all integers little-endian; see docs/format.md):

    magic            4 bytes  "MPFT"
    version          u32      currently 1
    sample_count     u64
    tokens_per_sample u32     word tokens, excluding the CLS row
    feature_dim      u32
    has_cls          u8       0 or 1; CLS stored as row 0 of each sample
    dtype            u8       0 = 32-bit float
    class_count      u32
    labels           u32 * sample_count
    features         f32 * sample_count * rows * feature_dim

Features are stored as 32-bit floats and promoted to 64-bit for
compute.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError, UsageError
from .head import TokenFeatures
from .rng import STREAM_BATCH, STREAM_SPLIT, STREAM_SYNTH, generator

MAGIC = b"MPFT"
VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sIQIIBBI")

REGIMES = ("mean_sep", "cov_sep", "mixed")


@dataclass(frozen=True)
class FeatureFileHeader:
    sample_count: int
    tokens_per_sample: int
    feature_dim: int
    has_cls: bool
    class_count: int
    version: int = VERSION
    dtype: int = DTYPE_F32

    @property
    def rows_per_sample(self) -> int:
        return self.tokens_per_sample + (1 if self.has_cls else 0)

    @property
    def payload_bytes(self) -> int:
        return 4 * self.sample_count * (1 + self.rows_per_sample * self.feature_dim)


@dataclass
class FeatureDataset:
    """In-memory feature collection: labels u32, features f32
    [sample x rows x dim], CLS in row 0 when present."""

    tokens_per_sample: int
    feature_dim: int
    has_cls: bool
    class_count: int
    labels: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint32)
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        rows = self.tokens_per_sample + (1 if self.has_cls else 0)
        if self.features.shape != (len(self.labels), rows, self.feature_dim):
            raise DataError(
                f"features shape {self.features.shape} does not match "
                f"{len(self.labels)} samples x {rows} rows x {self.feature_dim} dims")
        if len(self.labels) and self.labels.max() >= self.class_count:
            raise DataError(
                f"label {int(self.labels.max())} outside class count {self.class_count}")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features contain NaN or Inf")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def header(self) -> FeatureFileHeader:
        return FeatureFileHeader(
            sample_count=len(self.labels),
            tokens_per_sample=self.tokens_per_sample,
            feature_dim=self.feature_dim,
            has_cls=self.has_cls,
            class_count=self.class_count)

    def sample(self, i: int) -> TokenFeatures:
        """One sample promoted to float64, CLS split off if stored."""
        block = self.features[i].astype(np.float64)
        if self.has_cls:
            return TokenFeatures(tokens=block[1:], cls=block[0],
                                 label=int(self.labels[i]))
        return TokenFeatures(tokens=block, label=int(self.labels[i]))

    def raw_sample(self, i: int) -> np.ndarray:
        """The stored rows (CLS included) as float64, for backbone input."""
        return self.features[i].astype(np.float64)

    def subset(self, indices: np.ndarray) -> "FeatureDataset":
        return FeatureDataset(
            tokens_per_sample=self.tokens_per_sample,
            feature_dim=self.feature_dim,
            has_cls=self.has_cls,
            class_count=self.class_count,
            labels=self.labels[indices],
            features=self.features[indices])


def write_feature_file(path, ds: FeatureDataset) -> None:
    hdr = ds.header
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, hdr.version, hdr.sample_count,
                              hdr.tokens_per_sample, hdr.feature_dim,
                              1 if hdr.has_cls else 0, hdr.dtype,
                              hdr.class_count))
        fh.write(ds.labels.astype("<u4").tobytes())
        fh.write(ds.features.astype("<f4").tobytes())


def read_feature_file(path) -> FeatureDataset:
    """Read and validate an MPFT file.

    The magic and version are checked before the payload is touched;
    the payload length must match the header-implied byte count exactly.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise DataError(f"{path}: too short for a feature-file header")
        magic, version, n, tokens, dim, has_cls, dtype, classes = _HEADER.unpack(head)
        if magic != MAGIC:
            raise DataError(f"{path}: not a feature file (magic {magic!r})")
        if version != VERSION:
            raise DataError(f"{path}: unsupported version {version}")
        if dtype != DTYPE_F32:
            raise DataError(f"{path}: unsupported dtype code {dtype}")
        if has_cls not in (0, 1):
            raise DataError(f"{path}: has_cls must be 0 or 1, got {has_cls}")
        hdr = FeatureFileHeader(sample_count=n, tokens_per_sample=tokens,
                                feature_dim=dim, has_cls=bool(has_cls),
                                class_count=classes)
        payload = fh.read()
    if len(payload) != hdr.payload_bytes:
        raise DataError(
            f"{path}: corrupt payload, expected {hdr.payload_bytes} bytes "
            f"after the header, found {len(payload)}")
    label_bytes = 4 * n
    labels = np.frombuffer(payload[:label_bytes], dtype="<u4")
    rows = hdr.rows_per_sample
    features = np.frombuffer(payload[label_bytes:], dtype="<f4").reshape(n, rows, dim)
    return FeatureDataset(tokens_per_sample=tokens, feature_dim=dim,
                          has_cls=bool(has_cls), class_count=classes,
                          labels=labels.copy(), features=features.copy())


# ---------------------------------------------------------------------------
# synthetic generators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic feature dataset.

    mean_sep: class means sit at pairwise distance delta, identity
    covariance — separable from first-order statistics alone.

    cov_sep: all classes share a zero mean; class c correlates the
    coordinate pair (c, d/2 + c) with strength rho. The pair straddles
    the midpoint so adjacent-half cross-covariances see it, while every
    first-order statistic is class-independent by construction.

    mixed: both signals at once.

    Every sample also carries a CLS row equal to the uniform token
    mean, so CLS-mode heads run on synthetic data.
    """

    classes: int
    tokens: int
    dim: int
    regime: str
    per_class: int
    seed: int
    delta: float = 4.0
    rho: float = 0.8

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}, expected one of {REGIMES}")
        if not (0.0 <= self.rho < 1.0):
            raise ConfigError(f"rho must lie in [0, 1), got {self.rho}")
        if self.tokens < 1 or self.dim < 2 or self.per_class < 1:
            raise ConfigError("tokens >= 1, dim >= 2, per_class >= 1 required")
        if self.regime in ("mean_sep", "mixed") and self.classes > self.dim:
            raise ConfigError(
                f"mean separation places classes on distinct axes: need "
                f"classes <= dim, got {self.classes} > {self.dim}")
        if self.regime in ("cov_sep", "mixed") and self.classes > self.dim // 2:
            raise ConfigError(
                f"covariance separation needs classes <= dim/2, got "
                f"{self.classes} > {self.dim // 2}")


def class_means(spec: SynthSpec) -> np.ndarray:
    """Centered class means with exact pairwise distance delta."""
    mu = np.zeros((spec.classes, spec.dim))
    for c in range(spec.classes):
        mu[c, c] = spec.delta / np.sqrt(2.0)
    return mu - mu.mean(axis=0)


def class_covariance(spec: SynthSpec, c: int) -> np.ndarray:
    """Identity plus the class's off-diagonal correlation block."""
    sigma = np.eye(spec.dim)
    if spec.regime in ("cov_sep", "mixed"):
        i, j = c, spec.dim // 2 + c
        sigma[i, j] = sigma[j, i] = spec.rho
    return sigma


def synth_generate(spec: SynthSpec) -> FeatureDataset:
    """Deterministic synthesis from the spec's seed (Philox stream)."""
    rng = generator(STREAM_SYNTH, spec.seed)
    means = class_means(spec) if spec.regime in ("mean_sep", "mixed") \
        else np.zeros((spec.classes, spec.dim))
    half = spec.dim // 2
    n_samples = spec.classes * spec.per_class
    rows = spec.tokens + 1
    features = np.empty((n_samples, rows, spec.dim), dtype=np.float32)
    labels = np.empty(n_samples, dtype=np.uint32)
    idx = 0
    for c in range(spec.classes):
        for _ in range(spec.per_class):
            z = rng.standard_normal((spec.tokens, spec.dim))
            x = z.copy()
            if spec.regime in ("cov_sep", "mixed"):
                i, j = c, half + c
                x[:, j] = spec.rho * z[:, i] + np.sqrt(1.0 - spec.rho ** 2) * z[:, j]
            x += means[c]
            features[idx, 0] = x.mean(axis=0)
            features[idx, 1:] = x
            labels[idx] = c
            idx += 1
    return FeatureDataset(tokens_per_sample=spec.tokens, feature_dim=spec.dim,
                          has_cls=True, class_count=spec.classes,
                          labels=labels, features=features)


# ---------------------------------------------------------------------------
# batching and splitting
# ---------------------------------------------------------------------------

def batch_iter(ds: FeatureDataset, batch_size: int, seed: int,
               epoch: int) -> Iterator[np.ndarray]:
    """Index batches in an order derived solely from (seed, epoch).
    The last partial batch is kept."""
    if batch_size < 1:
        raise UsageError(f"batch size must be >= 1, got {batch_size}")
    order = generator(STREAM_BATCH, seed, sub=epoch).permutation(len(ds))
    for lo in range(0, len(ds), batch_size):
        yield order[lo:lo + batch_size]


def split_train_val(ds: FeatureDataset, fraction: float,
                    seed: int) -> tuple[FeatureDataset, FeatureDataset]:
    """Stratified split: per class, a seeded shuffle then a
    floor(fraction * n) cut into train."""
    if not (0.0 < fraction < 1.0):
        raise ConfigError(f"fraction must lie in (0, 1), got {fraction}")
    rng = generator(STREAM_SPLIT, seed)
    train_idx: list[np.ndarray] = []
    val_idx: list[np.ndarray] = []
    for c in range(ds.class_count):
        members = np.flatnonzero(ds.labels == c)
        if len(members) < 2:
            raise ConfigError(
                f"class {c} has {len(members)} sample(s); need >= 2 to split")
        members = members[rng.permutation(len(members))]
        cut = int(len(members) * fraction)
        cut = min(max(cut, 1), len(members) - 1)
        train_idx.append(members[:cut])
        val_idx.append(members[cut:])
    return (ds.subset(np.sort(np.concatenate(train_idx))),
            ds.subset(np.sort(np.concatenate(val_idx))))
