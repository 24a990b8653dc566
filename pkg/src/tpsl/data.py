"""Datasets, CSV ingestion and the vertical split between the two parties."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    classes: int = 2
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        x = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels).astype(int)
        ids = np.asarray(self.ids).astype(int)
        if x.ndim != 2:
            raise DataError("features must be a 2-D array")
        if not (x.shape[0] == y.shape[0] == ids.shape[0]):
            raise DataError(f"row counts differ: {x.shape[0]} / {y.shape[0]} / {ids.shape[0]}")
        if y.size and (y.min() < 0 or y.max() >= self.classes):
            raise DataError(f"labels must lie in 0..{self.classes - 1}")
        if np.unique(ids).size != ids.size:
            raise DataError("sample ids must be unique")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "ids", ids)
        if not self.feature_names:
            object.__setattr__(self, "feature_names", tuple(f"x{i}" for i in range(x.shape[1])))

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.features[rows], self.labels[rows], self.ids[rows],
                       self.classes, self.feature_names)


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian class-conditional data.

    Class means sit ``separation`` apart (binary: ``0`` and ``separation * w``
    for a random unit ``w``; k classes: scaled simplex corners). ``prior`` is
    the positive rate of the binary case; k-class labels are uniform.
    """

    n: int = 20000
    dim: int = 20
    classes: int = 2
    prior: float = 0.05
    separation: float = 2.0
    noise: float = 1.0

    def __post_init__(self):
        if self.n < 2 or self.dim < 1 or self.classes < 2:
            raise DataError("need n >= 2, dim >= 1, classes >= 2")
        if self.classes == 2 and not (1.0 / self.n <= self.prior <= 1.0 - 1.0 / self.n):
            raise DataError(f"prior must stay at least 1/n away from 0 and 1, got {self.prior}")
        if self.classes > 2 and self.dim < self.classes:
            raise DataError("k-class data needs dim >= classes")
        if self.separation < 0 or self.noise <= 0:
            raise DataError("separation must be >= 0 and noise > 0")


def gen_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    if spec.classes == 2:
        y = (rng.random(spec.n) < spec.prior).astype(int)
        w = rng.standard_normal(spec.dim)
        means = np.stack([np.zeros(spec.dim), spec.separation * w / np.linalg.norm(w)])
    else:
        y = rng.integers(0, spec.classes, size=spec.n)
        q, _ = np.linalg.qr(rng.standard_normal((spec.dim, spec.classes)))
        # orthonormal means are sqrt(2) apart
        means = (spec.separation / math.sqrt(2.0)) * q.T
    x = means[y] + spec.noise * rng.standard_normal((spec.n, spec.dim))
    return Dataset(x, y, np.arange(spec.n), spec.classes)


# --- CSV -----------------------------------------------------------------------


@dataclass(frozen=True)
class CsvSchema:
    label_column: str = "label"
    feature_columns: tuple[str, ...] | None = None  # None: every other column
    classes: int = 2
    id_column: str | None = None


def load_csv(path, schema: CsvSchema = CsvSchema()) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if schema.label_column not in header:
            raise DataError(f"{path}: label column {schema.label_column!r} not in header")
        skip = {schema.label_column, schema.id_column}
        feats = list(schema.feature_columns) if schema.feature_columns else [h for h in header if h not in skip]
        missing = [c for c in feats if c not in header]
        if missing:
            raise DataError(f"{path}: feature columns {missing} not in header")
        col = {h: i for i, h in enumerate(header)}
        fidx = [col[c] for c in feats]
        lidx = col[schema.label_column]
        iidx = col.get(schema.id_column) if schema.id_column else None
        rows, labels, ids = [], [], []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(row[i]) for i in fidx])
                lab = float(row[lidx])
            except ValueError as exc:
                raise DataError(f"{path}:{line_no}: non-numeric cell ({exc})") from None
            if not all(math.isfinite(v) for v in rows[-1]):
                raise DataError(f"{path}:{line_no}: non-finite feature value")
            if lab != int(lab) or not 0 <= lab < schema.classes:
                raise DataError(f"{path}:{line_no}: label {row[lidx]!r} outside 0..{schema.classes - 1}")
            labels.append(int(lab))
            if iidx is not None:
                try:
                    ids.append(int(row[iidx]))
                except ValueError:
                    raise DataError(f"{path}:{line_no}: non-integer id {row[iidx]!r}") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    ids_arr = np.asarray(ids) if iidx is not None else np.arange(len(rows))
    return Dataset(np.asarray(rows), np.asarray(labels), ids_arr, schema.classes, tuple(feats))


def write_csv(ds: Dataset, path, label_column: str = "label", with_ids: bool = False):
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow((["id"] if with_ids else []) + list(ds.feature_names) + [label_column])
        for i in range(len(ds)):
            vals = [repr(float(v)) for v in ds.features[i]]
            w.writerow(([str(ds.ids[i])] if with_ids else []) + vals + [str(ds.labels[i])])


def standardize(train: Dataset, *others: Dataset):
    """Z-score every column with the statistics of ``train``."""
    mu = train.features.mean(axis=0)
    sd = train.features.std(axis=0)
    sd[sd == 0] = 1.0
    out = [Dataset((d.features - mu) / sd, d.labels, d.ids, d.classes, d.feature_names)
           for d in (train, *others)]
    return out[0] if not others else tuple(out)


def split_train_test(ds: Dataset, test_fraction: float, seed: int):
    if not 0 < test_fraction < 1:
        raise DataError(f"test fraction must lie in (0, 1), got {test_fraction}")
    n_test = int(round(len(ds) * test_fraction))
    if n_test == 0 or n_test == len(ds):
        raise DataError(f"test fraction {test_fraction} leaves an empty side for n={len(ds)}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


# --- vertical split --------------------------------------------------------------


@dataclass(frozen=True)
class FeatureView:
    ids: np.ndarray
    features: np.ndarray


@dataclass(frozen=True)
class LabelView:
    ids: np.ndarray
    labels: np.ndarray
    classes: int


@dataclass(frozen=True)
class PartyViews:
    feature_party: FeatureView
    label_party: LabelView


def vertical_partition(ds: Dataset) -> PartyViews:
    return PartyViews(
        FeatureView(ds.ids.copy(), ds.features.copy()),
        LabelView(ds.ids.copy(), ds.labels.copy(), ds.classes),
    )


def reassemble(views: PartyViews, feature_names: tuple[str, ...] = ()) -> Dataset:
    fv, lv = views.feature_party, views.label_party
    if not np.array_equal(fv.ids, lv.ids):
        raise DataError("party views are not aligned")
    return Dataset(fv.features, lv.labels, fv.ids, lv.classes, feature_names)
