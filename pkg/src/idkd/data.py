"""Datasets, loaders, synthetic generators and the Dirichlet partitioner."""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, ParseError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature rows with optional integer labels. Arrays are read-only."""

    features: np.ndarray
    labels: np.ndarray | None
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float32)
        if feats.ndim != 2:
            raise InvalidInputError(f"features must be 2-D, got shape {feats.shape}")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        if self.num_classes < 1:
            raise InvalidInputError("num_classes must be positive")
        if self.labels is not None:
            labels = np.array(self.labels, dtype=np.int64)
            if labels.shape != (feats.shape[0],):
                raise InvalidInputError(
                    f"{feats.shape[0]} feature rows but label shape {labels.shape}")
            if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise InvalidInputError(f"labels must lie in [0, {self.num_classes})")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.features.shape[0]

    @property
    def dims(self) -> int:
        return self.features.shape[1]

    def subset(self, indices, name: str | None = None) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.features[idx], labels, self.num_classes, name or self.name)

    def unlabeled(self, name: str | None = None) -> "Dataset":
        return Dataset(self.features, None, self.num_classes, name or self.name)

    def class_counts(self) -> np.ndarray:
        if self.labels is None:
            raise InvalidInputError(f"dataset {self.name!r} has no labels")
        return np.bincount(self.labels, minlength=self.num_classes)


@dataclass(frozen=True, eq=False)
class PartitionMap:
    node_indices: tuple[np.ndarray, ...]
    alpha: float
    seed: int

    def __post_init__(self):
        frozen = []
        for idx in self.node_indices:
            a = np.array(idx, dtype=np.int64)
            a.setflags(write=False)
            frozen.append(a)
        object.__setattr__(self, "node_indices", tuple(frozen))

    @property
    def n_nodes(self) -> int:
        return len(self.node_indices)

    def sizes(self) -> list[int]:
        return [len(a) for a in self.node_indices]

    def class_histograms(self, labels: np.ndarray, num_classes: int) -> np.ndarray:
        labels = np.asarray(labels)
        return np.stack([np.bincount(labels[idx], minlength=num_classes) for idx in self.node_indices])

    def to_json(self) -> str:
        return json.dumps({"alpha": self.alpha, "seed": self.seed,
                           "node_indices": [a.tolist() for a in self.node_indices]})


def partition_rng(seed: int, n_nodes: int, alpha: float) -> np.random.Generator:
    """RNG that depends only on ``(seed, n_nodes, alpha)``."""
    alpha_bits = struct.unpack("<Q", struct.pack("<d", float(alpha)))[0]
    return np.random.default_rng(np.random.SeedSequence(
        int(seed), spawn_key=(0xD1, int(n_nodes), alpha_bits)))


def _largest_remainder(shares: np.ndarray, total: int) -> np.ndarray:
    raw = shares * total
    counts = np.floor(raw).astype(np.int64)
    left = total - counts.sum()
    if left > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:left]] += 1
    return counts


def _dirichlet(rng: np.random.Generator, alpha: float, n: int) -> np.ndarray:
    p = rng.dirichlet(np.full(n, alpha))
    if not np.all(np.isfinite(p)) or p.sum() <= 0:
        # all gamma draws underflowed: the limit is a single-node vertex
        p = np.zeros(n)
        p[rng.integers(n)] = 1.0
    return p


def dirichlet_partition(labels, n_nodes: int, alpha: float, seed: int = 0,
                        rng: np.random.Generator | None = None) -> PartitionMap:
    """Split sample indices across nodes with per-class ``Dirichlet(alpha)`` proportions.

    For every class one proportion vector over nodes is drawn and that class's
    (shuffled) indices are dealt out in those proportions using largest-remainder
    rounding. A node left empty takes one sample from the currently largest node.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if n_nodes < 2:
        raise InvalidInputError(f"need at least 2 nodes, got {n_nodes}")
    if not alpha > 0:
        raise InvalidInputError(f"alpha must be positive, got {alpha}")
    if labels.size < n_nodes:
        raise InvalidInputError(f"{labels.size} samples cannot cover {n_nodes} nodes")
    if rng is None:
        rng = partition_rng(seed, n_nodes, alpha)
    buckets: list[list[int]] = [[] for _ in range(n_nodes)]
    for c in np.unique(labels):
        idx = np.nonzero(labels == c)[0]
        idx = idx[rng.permutation(idx.size)]
        counts = _largest_remainder(_dirichlet(rng, alpha, n_nodes), idx.size)
        start = 0
        for node, k in enumerate(counts):
            buckets[node].extend(idx[start:start + k].tolist())
            start += k
    for node in range(n_nodes):
        if not buckets[node]:
            donor = max(range(n_nodes), key=lambda k: (len(buckets[k]), -k))
            buckets[node].append(buckets[donor].pop())
    return PartitionMap(tuple(np.sort(np.array(b, dtype=np.int64)) for b in buckets), float(alpha), int(seed))


def split_indices(n: int, fraction: float, rng: np.random.Generator):
    """Random ``(keep, held_out)`` index arrays with ``round(fraction * n)`` held out."""
    if not 0 < fraction < 1:
        raise InvalidInputError(f"fraction must lie in (0, 1), got {fraction}")
    perm = rng.permutation(n)
    k = int(round(fraction * n))
    return np.sort(perm[k:]), np.sort(perm[:k])


def train_val_split(dataset: Dataset, fraction: float = 0.10, seed: int = 0):
    train_idx, val_idx = split_indices(len(dataset), fraction, np.random.default_rng(seed))
    return (dataset.subset(train_idx, f"{dataset.name}-train"),
            dataset.subset(val_idx, f"{dataset.name}-val"))


# ---------------------------------------------------------------- loaders


def _read_idx(path: Path, expected_magic: int, ndim: int):
    raw = path.read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise ParseError("file too short for IDX magic number", path=path, offset=len(raw))
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise ParseError(f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", path=path, offset=0)
    if len(raw) < header:
        raise ParseError("truncated IDX header", path=path, offset=len(raw))
    shape = struct.unpack(f">{ndim}I", raw[4:header])
    need = header + int(np.prod(shape))
    if len(raw) < need:
        raise ParseError(f"truncated IDX payload: need {need} bytes, have {len(raw)}", path=path, offset=len(raw))
    if len(raw) > need:
        raise ParseError(f"{len(raw) - need} trailing bytes after IDX payload", path=path, offset=need)
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(shape)


def load_idx(images_path, labels_path=None, num_classes: int = 10, name: str | None = None) -> Dataset:
    """Read an IDX image file (and optionally its label file) into a flat-feature Dataset.

    Pixels are scaled to ``[0, 1]``.
    """
    images_path = Path(images_path)
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    features = images.reshape(images.shape[0], -1).astype(np.float32) / 255.0
    labels = None
    if labels_path is not None:
        labels_path = Path(labels_path)
        labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1).astype(np.int64)
        if labels.shape[0] != features.shape[0]:
            raise ParseError(f"{labels.shape[0]} labels for {features.shape[0]} images", path=labels_path, offset=4)
        if labels.size and labels.max() >= num_classes:
            raise InvalidInputError(f"{labels_path}: label {labels.max()} outside [0, {num_classes})")
    return Dataset(features, labels, num_classes, name or images_path.stem)


@dataclass(frozen=True)
class CsvSchema:
    label_column: str | None = "label"
    num_classes: int = 10


def load_csv(path, schema: CsvSchema = CsvSchema(), name: str | None = None) -> Dataset:
    """One row per sample with a header; every non-label column is a numeric feature."""
    path = Path(path)
    with path.open(newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file, expected a header row", path=path, line=1) from None
        if schema.label_column is not None and schema.label_column not in header:
            raise ParseError(f"label column {schema.label_column!r} missing from header", path=path, line=1)
        label_pos = header.index(schema.label_column) if schema.label_column is not None else None
        rows, labels = [], []
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} cells, got {len(row)}", path=path, line=line)
            try:
                values = [float(v) for k, v in enumerate(row) if k != label_pos]
                if label_pos is not None:
                    label_text = row[label_pos].strip()
                    label = int(label_text)
            except ValueError as exc:
                raise ParseError(f"non-numeric cell ({exc})", path=path, line=line) from None
            if not all(np.isfinite(values)):
                raise ParseError("non-finite feature value", path=path, line=line)
            if label_pos is not None:
                if not 0 <= label < schema.num_classes:
                    raise InvalidInputError(f"{path}: line {line}: label {label} outside [0, {schema.num_classes})")
                labels.append(label)
            rows.append(values)
    if not rows:
        raise ParseError("no data rows", path=path, line=2)
    return Dataset(np.array(rows, dtype=np.float32), np.array(labels) if label_pos is not None else None,
                   schema.num_classes, name or path.stem)


# ------------------------------------------------------------ generators


@dataclass(frozen=True)
class GaussianMixture:
    """Isotropic Gaussian classes with fixed means.

    With ``dims >= num_classes`` the means are ``scale * e_c`` (simplex
    vertices); otherwise they sit on a circle of radius ``scale`` in the first
    two coordinates. ``shift`` translates every mean along the unit all-ones
    direction.
    """

    num_classes: int
    dims: int
    spread: float = 1.0
    scale: float = 1.0
    shift: float = 0.0

    def means(self) -> np.ndarray:
        c, d = self.num_classes, self.dims
        m = np.zeros((c, d))
        if d >= c:
            m[np.arange(c), np.arange(c)] = self.scale
        elif d >= 2:
            ang = 2 * np.pi * np.arange(c) / c
            m[:, 0] = self.scale * np.cos(ang)
            m[:, 1] = self.scale * np.sin(ang)
        else:
            m[:, 0] = self.scale * np.arange(c)
        return m + self.shift / np.sqrt(d)

    def sample(self, per_class: int, seed: int, name: str = "mixture") -> Dataset:
        rng = np.random.default_rng(seed)
        labels = np.repeat(np.arange(self.num_classes), per_class)
        noise = rng.standard_normal((labels.size, self.dims))
        feats = self.means()[labels] + self.spread * noise
        order = rng.permutation(labels.size)
        return Dataset(feats[order], labels[order], self.num_classes, name)


def synthetic_gaussian_mixture(num_classes: int, dims: int, per_class: int, spread: float,
                               seed: int, scale: float = 1.0, shift: float = 0.0) -> Dataset:
    if min(num_classes, dims, per_class) <= 0:
        raise InvalidInputError("num_classes, dims and per_class must be positive")
    return GaussianMixture(num_classes, dims, spread, scale, shift).sample(per_class, seed)


@dataclass(frozen=True)
class UniformNoise:
    dims: int
    low: float = 0.0
    high: float = 1.0


def make_public_set(source, size: int, *, seed: int = 0, start: int = 0,
                    num_classes: int | None = None, name: str = "public") -> Dataset:
    """Unlabeled public set from a labeled dataset slice, a mixture, or uniform noise."""
    if size <= 0:
        raise InvalidInputError("public set size must be positive")
    if isinstance(source, Dataset):
        if start + size > len(source):
            raise InvalidInputError(f"slice [{start}, {start + size}) exceeds source size {len(source)}")
        return Dataset(source.features[start:start + size], None, source.num_classes, name)
    if isinstance(source, GaussianMixture):
        per_class = -(-size // source.num_classes)
        drawn = source.sample(per_class, seed)
        return Dataset(drawn.features[:size], None, source.num_classes, name)
    if isinstance(source, UniformNoise):
        rng = np.random.default_rng(seed)
        feats = rng.uniform(source.low, source.high, size=(size, source.dims))
        return Dataset(feats, None, num_classes or 1, name)
    raise InvalidInputError(f"unsupported public-set source {type(source).__name__}")


def shifted(mixture: GaussianMixture, shift: float) -> GaussianMixture:
    return replace(mixture, shift=shift)

