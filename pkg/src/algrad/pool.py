"""Datasets, the labeled/unlabeled partition, the simulated oracle and file loaders."""

from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class Oracle:
    """Read-only access to the true labels, one index at a time."""

    def __init__(self, labels: np.ndarray):
        self._labels = np.asarray(labels, dtype=np.int64).copy()
        self._labels.setflags(write=False)

    def label(self, index: int) -> int:
        return int(self._labels[index])

    def labels(self, indices: Sequence[int]) -> np.ndarray:
        return self._labels[np.asarray(indices, dtype=np.int64)].copy()


class Dataset:
    """Samples, a train/test flag per sample, and labels kept behind an Oracle."""

    def __init__(self, samples: np.ndarray, labels: np.ndarray, num_classes: int | None = None,
                 is_train: np.ndarray | None = None):
        samples = np.asarray(samples, dtype=np.float64)
        labels = np.asarray(labels)
        if len(samples) != len(labels):
            raise ValueError(f"{len(samples)} samples but {len(labels)} labels")
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise ValueError("labels must be integers")
        labels = labels.astype(np.int64)
        if num_classes is None:
            num_classes = int(labels.max()) + 1 if labels.size else 0
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ValueError(f"label out of range [0, {num_classes})")
        self.samples = samples
        self.samples.setflags(write=False)
        self.num_classes = int(num_classes)
        self.is_train = (np.ones(len(samples), dtype=bool) if is_train is None
                         else np.asarray(is_train, dtype=bool).copy())
        self._oracle = Oracle(labels)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.samples.shape[1:])

    @property
    def oracle(self) -> Oracle:
        return self._oracle

    @property
    def train_indices(self) -> np.ndarray:
        return np.flatnonzero(self.is_train)

    @property
    def test_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.is_train)

    def test_split(self) -> tuple[np.ndarray, np.ndarray]:
        idx = self.test_indices
        return self.samples[idx], self._oracle.labels(idx)

    def reshaped(self, shape) -> "Dataset":
        out = Dataset(self.samples.reshape((len(self),) + tuple(shape)),
                      self._oracle.labels(np.arange(len(self))), self.num_classes, self.is_train)
        return out

    def normalized(self, mean: float, std: float) -> "Dataset":
        if std <= 0:
            raise ValueError("normalization std must be positive")
        return Dataset((self.samples - mean) / std, self._oracle.labels(np.arange(len(self))),
                       self.num_classes, self.is_train)

    @staticmethod
    def combine(train: "Dataset", test: "Dataset") -> "Dataset":
        if train.input_shape != test.input_shape:
            raise ValueError(f"train/test shapes differ: {train.input_shape} vs {test.input_shape}")
        n_classes = max(train.num_classes, test.num_classes)
        all_idx = lambda d: d.oracle.labels(np.arange(len(d)))  # noqa: E731
        return Dataset(np.concatenate([train.samples, test.samples]),
                       np.concatenate([all_idx(train), all_idx(test)]), n_classes,
                       np.concatenate([np.ones(len(train), bool), np.zeros(len(test), bool)]))


@dataclass
class PoolState:
    """Labeled set L and unlabeled set U over the train indices, plus query history."""

    train: tuple[int, ...]
    labeled: list[int] = field(default_factory=list)
    unlabeled: list[int] = field(default_factory=list)
    history: list[tuple[int, list[int]]] = field(default_factory=list)
    labels: dict[int, int] = field(default_factory=dict)

    def labeled_labels(self) -> np.ndarray:
        return np.array([self.labels[i] for i in self.labeled], dtype=np.int64)

    def check(self) -> None:
        lab, unl = set(self.labeled), set(self.unlabeled)
        if lab & unl:
            raise AssertionError("labeled and unlabeled sets overlap")
        if lab | unl != set(self.train) or len(lab) + len(unl) != len(self.train):
            raise AssertionError("labeled and unlabeled sets do not partition the train set")
        if replay_history(self.history) != self.labeled:
            raise AssertionError("history does not replay to the labeled set")


def init_pool(dataset: Dataset, budget: int, rng: np.random.Generator) -> PoolState:
    train = dataset.train_indices
    if budget <= 0:
        raise ValueError(f"initial budget must be positive, got {budget}")
    if budget > len(train):
        raise ValueError(f"initial budget {budget} exceeds {len(train)} train samples")
    picked = sorted(int(i) for i in rng.choice(train, size=budget, replace=False))
    chosen = set(picked)
    pool = PoolState(train=tuple(int(i) for i in train), labeled=list(picked),
                     unlabeled=[int(i) for i in train if int(i) not in chosen],
                     history=[(0, list(picked))])
    pool.labels = {i: dataset.oracle.label(i) for i in picked}
    return pool


def annotate_and_move(pool: PoolState, selected: Sequence[int], oracle: Oracle,
                      round_: int | None = None) -> PoolState:
    """Reveal labels for ``selected`` and move them from U to L. All-or-nothing."""
    selected = [int(i) for i in selected]
    if not selected:
        return pool
    if len(set(selected)) != len(selected):
        raise ValueError("duplicate indices in selection")
    unlabeled = set(pool.unlabeled)
    bad = [i for i in selected if i not in unlabeled]
    if bad:
        raise ValueError(f"indices not in the unlabeled pool: {bad[:10]}")
    moved = set(selected)
    pool.unlabeled = [i for i in pool.unlabeled if i not in moved]
    pool.labeled = pool.labeled + selected
    for i in selected:
        pool.labels[i] = oracle.label(i)
    if round_ is None:
        round_ = pool.history[-1][0] + 1 if pool.history else 0
    pool.history.append((round_, list(selected)))
    return pool


def replay_history(history) -> list[int]:
    out: list[int] = []
    for _, indices in history:
        out.extend(indices)
    return out


# -- IDX ---------------------------------------------------------------------

def _read_maybe_gzip(path) -> bytes:
    raw = Path(path).read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def _parse_idx(blob: bytes, magic: int, kind: str) -> np.ndarray:
    if len(blob) < 4:
        raise ValueError(f"{kind}: truncated header at byte 0")
    (got,) = struct.unpack(">I", blob[:4])
    if got != magic:
        raise ValueError(f"{kind}: bad magic 0x{got:08x} at byte 0 (expected 0x{magic:08x})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise ValueError(f"{kind}: truncated header at byte {len(blob)}")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    expected = header + int(np.prod(dims))
    if len(blob) < expected:
        raise ValueError(f"{kind}: truncated payload at byte {len(blob)} (expected {expected} bytes)")
    return np.frombuffer(blob, dtype=np.uint8, count=int(np.prod(dims)), offset=header).reshape(dims)


def load_idx(images_path, labels_path, train: bool = True, limit: int | None = None,
             num_classes: int | None = None) -> Dataset:
    """Load an IDX image/label pair as (N, 1, H, W) samples scaled to [0, 1]."""
    images = _parse_idx(_read_maybe_gzip(images_path), IDX_IMAGES_MAGIC, "images")
    labels = _parse_idx(_read_maybe_gzip(labels_path), IDX_LABELS_MAGIC, "labels")
    if len(images) != len(labels):
        raise ValueError(f"count mismatch: {len(images)} images vs {len(labels)} labels "
                         f"(label count at byte 4)")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    samples = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(samples, labels.astype(np.int64), num_classes, is_train=np.full(len(labels), train))


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n) + labels.tobytes())


# -- CSV ---------------------------------------------------------------------

def load_csv(path, train: bool = True, num_classes: int | None = None) -> Dataset:
    """Read ``label,f0,f1,...`` rows into a vector dataset."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or not header or header[0].strip() != "label" or any(
                h.strip() != f"f{k}" for k, h in enumerate(header[1:])):
            raise ValueError(f"{path}: line 1: missing or malformed header 'label,f0,f1,...'")
        width = len(header)
        rows, labels = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ValueError(f"{path}: line {line_no}: ragged row ({len(row)} cells, expected {width})")
            try:
                label = int(row[0])
                feats = [float(c) for c in row[1:]]
            except ValueError:
                raise ValueError(f"{path}: line {line_no}: non-numeric cell") from None
            if label < 0 or (num_classes is not None and label >= num_classes):
                raise ValueError(f"{path}: line {line_no}: label out of range")
            if not all(math.isfinite(v) for v in feats):
                raise ValueError(f"{path}: line {line_no}: non-finite value")
            labels.append(label)
            rows.append(feats)
    samples = np.array(rows, dtype=np.float64).reshape(len(rows), width - 1)
    return Dataset(samples, np.array(labels, dtype=np.int64), num_classes,
                   is_train=np.full(len(rows), train))


def write_csv(path, samples: np.ndarray, labels: np.ndarray) -> None:
    samples = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(["label"] + [f"f{k}" for k in range(samples.shape[1])]) + "\n")
        for label, row in zip(labels, samples):
            fh.write(",".join([str(int(label))] + [repr(float(v)) for v in row]) + "\n")


def write_dataset_csv(dataset: Dataset, train_path, test_path) -> None:
    for path, idx in ((train_path, dataset.train_indices), (test_path, dataset.test_indices)):
        write_csv(path, dataset.samples[idx], dataset.oracle.labels(idx))


# -- synthetic ---------------------------------------------------------------

def make_blobs(n_per_class: int, num_classes: int, dim: int, spread: float,
               rng: np.random.Generator, class_ratios: Sequence[float] | None = None,
               center_scale: float = 10.0) -> Dataset:
    """Isotropic Gaussian clusters with an 80/20 seeded train/test split."""
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    ratios = [1.0] * num_classes if class_ratios is None else list(class_ratios)
    if len(ratios) != num_classes or any(r <= 0 for r in ratios):
        raise ValueError("class_ratios must give one positive ratio per class")
    centers = rng.uniform(-center_scale, center_scale, size=(num_classes, dim))
    samples, labels = [], []
    for c, r in enumerate(ratios):
        count = int(round(n_per_class * r))
        samples.append(centers[c] + spread * rng.standard_normal((count, dim)))
        labels.append(np.full(count, c, dtype=np.int64))
    x = np.concatenate(samples)
    y = np.concatenate(labels)
    order = rng.permutation(len(x))
    x, y = x[order], y[order]
    is_train = np.zeros(len(x), dtype=bool)
    is_train[: len(x) * 4 // 5] = True
    ds = Dataset(x, y, num_classes, is_train)
    ds.centers = centers
    return ds
