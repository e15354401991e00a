"""Dataset representation, synthetic blob generation, and CSV ingestion.

Labels are dense integers in ``[0, C)``; loaders reject sparse label sets
because downstream flip-probability tables index rows by label.  Datasets
are immutable after construction and safe for concurrent reads.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import LabelRangeError, ParseError


@dataclass(frozen=True)
class LabeledDataset:
    """Feature matrix plus observed labels, optionally ground-truth labels.

    ``true_labels`` is present iff noise was injected or ground truth is
    otherwise known; ``num_classes`` is the global class count, which a
    client-local view retains even when some classes are absent locally.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    true_labels: np.ndarray | None = None
    name: str = "dataset"

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        if self.true_labels is not None:
            object.__setattr__(self, "true_labels", np.asarray(self.true_labels, dtype=np.int64))
        if features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {features.shape}")
        if labels.ndim != 1 or len(labels) != features.shape[0]:
            raise ValueError("labels length must match feature row count")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")
        if self.true_labels is not None:
            tl = self.true_labels
            if len(tl) != len(labels):
                raise ValueError("true_labels length must match labels length")
            if len(tl) and (tl.min() < 0 or tl.max() >= self.num_classes):
                raise ValueError("true_labels must lie in [0, num_classes)")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def with_labels(self, labels: np.ndarray, true_labels: np.ndarray | None, name: str | None = None) -> "LabeledDataset":
        """Copy of this dataset with replaced (observed, true) label vectors."""
        return LabeledDataset(
            features=self.features,
            labels=labels,
            num_classes=self.num_classes,
            true_labels=true_labels,
            name=self.name if name is None else name,
        )


@dataclass(frozen=True)
class ClassHistogram:
    """Per-class sample counts for a dataset or an index selection."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        object.__setattr__(self, "counts", np.asarray(self.counts, dtype=np.int64))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def nonzero_classes(self) -> int:
        return int(np.count_nonzero(self.counts))


def _blob_means(num_classes: int, dim: int, separation: float) -> np.ndarray:
    """Class means with adjacent pairwise distance exactly ``separation``.

    dim >= 2 places means on a circle in the first two coordinates; dim == 1
    spaces them evenly on a line.  Placement is deterministic.
    """
    means = np.zeros((num_classes, dim), dtype=np.float64)
    if dim == 1:
        means[:, 0] = separation * np.arange(num_classes)
        return means
    radius = separation / (2.0 * np.sin(np.pi / num_classes))
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return means


def make_synthetic_blobs(num_classes: int, per_class: int, dim: int, separation: float, seed: int, name: str = "blobs") -> LabeledDataset:
    """Balanced isotropic Gaussian blobs, one unit-variance cluster per class.

    Deterministic for fixed arguments; ``true_labels`` equals ``labels``
    since the construction is clean.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if not separation > 0:
        raise ValueError("separation must be > 0")
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    means = _blob_means(num_classes, dim, separation)
    gen = rng.stream(seed, "blobs")
    features = means[labels] + gen.standard_normal((len(labels), dim))
    return LabeledDataset(
        features=features,
        labels=labels,
        num_classes=num_classes,
        true_labels=labels.copy(),
        name=name,
    )


TRUE_LABEL_COLUMN = "true_label"


def load_csv(path: str, label_column: str, true_label_column: str = TRUE_LABEL_COLUMN, name: str | None = None) -> LabeledDataset:
    """Load a dataset from a headered CSV file.

    All columns other than the label column (and the optional true-label
    column, when present) are parsed as real-valued features.  Labels must
    form a contiguous integer range starting at 0.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file, header row required", row=1) from None
        if label_column not in header:
            raise ParseError(f"label column {label_column!r} not found in header", row=1)
        label_idx = header.index(label_column)
        true_idx = header.index(true_label_column) if true_label_column in header else None
        feature_cols = [i for i in range(len(header)) if i != label_idx and i != true_idx]

        features: list[list[float]] = []
        labels: list[int] = []
        true_labels: list[int] = []
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(row)}", row=row_no)
            try:
                labels.append(int(row[label_idx]))
            except ValueError:
                raise ParseError("label is not an integer", row=row_no, column=label_column) from None
            if true_idx is not None:
                try:
                    true_labels.append(int(row[true_idx]))
                except ValueError:
                    raise ParseError("true label is not an integer", row=row_no, column=true_label_column) from None
            try:
                features.append([float(row[i]) for i in feature_cols])
            except ValueError as exc:
                bad = next(i for i in feature_cols if not _is_float(row[i]))
                raise ParseError(str(exc), row=row_no, column=header[bad]) from None

    label_arr = np.asarray(labels, dtype=np.int64)
    if len(label_arr) == 0:
        raise ParseError("file contains no data rows", row=2)
    # Contiguity is checked over the union of observed and (when present)
    # true labels: noise can wipe a class out of the observed column without
    # invalidating the file.
    pool = np.concatenate([label_arr, np.asarray(true_labels, dtype=np.int64)]) if true_labels else label_arr
    present = np.unique(pool)
    if present.min() < 0:
        raise LabelRangeError("negative label values are not allowed")
    num_classes = int(present.max()) + 1
    if len(present) != num_classes:
        missing = sorted(set(range(num_classes)) - set(present.tolist()))
        raise LabelRangeError(f"labels are not contiguous from 0: missing {missing}")
    if num_classes < 2:
        raise LabelRangeError("at least two classes are required")
    return LabeledDataset(
        features=np.asarray(features, dtype=np.float64),
        labels=label_arr,
        num_classes=num_classes,
        true_labels=np.asarray(true_labels, dtype=np.int64) if true_labels else None,
        name=name if name is not None else str(path),
    )


def _is_float(text: str) -> bool:
    try:
        float(text)
        return True
    except ValueError:
        return False


def save_csv(ds: LabeledDataset, path: str, label_column: str = "label", true_label_column: str = TRUE_LABEL_COLUMN) -> None:
    """Write a dataset so that ``load_csv`` round-trips it bit-compatibly.

    Features are written with 17 significant digits (lossless for float64);
    the true-label column is emitted only when ground truth is known.
    """
    header = [f"x{i}" for i in range(ds.dim)] + [label_column]
    if ds.true_labels is not None:
        header.append(true_label_column)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(len(ds)):
            row = [format(v, ".17g") for v in ds.features[i]]
            row.append(str(int(ds.labels[i])))
            if ds.true_labels is not None:
                row.append(str(int(ds.true_labels[i])))
            writer.writerow(row)


def class_histogram(ds: LabeledDataset, indices=None) -> ClassHistogram:
    """Count observed labels, optionally restricted to an index selection."""
    if indices is None:
        selected = ds.labels
    else:
        idx = np.asarray(indices, dtype=np.int64)
        if len(idx) and (idx.min() < 0 or idx.max() >= len(ds)):
            raise IndexError(f"index out of range for dataset of size {len(ds)}")
        selected = ds.labels[idx]
    counts = np.bincount(selected, minlength=ds.num_classes)
    return ClassHistogram(counts=counts)
