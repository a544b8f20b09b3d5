"""Tabular ingestion and preprocessing: CSV loading, NaN/string column
culling, correlation filtering, random train/test split and train-fitted
z-score normalization."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np


class DataError(Exception):
    """Base class for input data problems (CLI exit code 2)."""


class MissingTarget(DataError):
    pass


class EmptyFile(DataError):
    pass


class RaggedRow(DataError):
    def __init__(self, path, line: int, expected: int, found: int):
        super().__init__(f"{path}: line {line} has {found} cells, header has {expected}")
        self.line = line


class TargetUnusable(DataError):
    pass


class ConstantInput(DataError):
    pass


class NamedColumnAbsent(DataError):
    pass


class ZeroSigma(DataError):
    pass


class HeaderMismatch(DataError):
    pass


# --------------------------------------------------------------------------
# raw tables

@dataclass
class RawTable:
    """Parsed CSV before cleaning.

    ``values`` holds the numeric reading of each cell (NaN when the cell
    is blank or not a number); ``missing`` and ``non_numeric`` tag why.
    """

    column_names: list[str]
    values: np.ndarray          # (rows, cols)
    missing: np.ndarray         # bool (rows, cols)
    non_numeric: np.ndarray     # bool (rows, cols)
    target_name: str | None
    source: str = ""

    @property
    def row_count(self) -> int:
        return self.values.shape[0]

    def column_is_numeric(self, j: int) -> bool:
        return not (self.missing[:, j].any() or self.non_numeric[:, j].any())


def _parse_cell(text: str) -> tuple[float, bool, bool]:
    s = text.strip()
    if s == "":
        return math.nan, True, False
    try:
        v = float(s)
    except ValueError:
        return math.nan, False, True
    if not math.isfinite(v):
        # literal NaN/inf markers count as missing readings
        return math.nan, True, False
    return v, False, False


def load_table(path, target_name: str | None) -> RawTable:
    """Read a header-first CSV. ``target_name=None`` skips the target check."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyFile(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        if not any(header):
            raise EmptyFile(f"{path}: header row is empty")
        if target_name is not None and target_name not in header:
            raise MissingTarget(f"{path}: target column {target_name!r} not in header")
        width = len(header)
        vals, miss, nonnum = [], [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise RaggedRow(path, line_no, width, len(row))
            parsed = [_parse_cell(c) for c in row]
            vals.append([p[0] for p in parsed])
            miss.append([p[1] for p in parsed])
            nonnum.append([p[2] for p in parsed])
    if not vals:
        raise EmptyFile(f"{path}: no data rows")
    return RawTable(
        column_names=header,
        values=np.array(vals, dtype=float),
        missing=np.array(miss, dtype=bool),
        non_numeric=np.array(nonnum, dtype=bool),
        target_name=target_name,
        source=str(path),
    )


def concat_tables(tables: Sequence[RawTable]) -> RawTable:
    """Row-wise concatenation; every table must share the same header."""
    if not tables:
        raise EmptyFile("no tables to concatenate")
    first = tables[0]
    for t in tables[1:]:
        if t.column_names != first.column_names:
            raise HeaderMismatch(f"{t.source}: header differs from {first.source}")
    return RawTable(
        column_names=list(first.column_names),
        values=np.vstack([t.values for t in tables]),
        missing=np.vstack([t.missing for t in tables]),
        non_numeric=np.vstack([t.non_numeric for t in tables]),
        target_name=first.target_name,
        source="+".join(t.source for t in tables),
    )


# --------------------------------------------------------------------------
# datasets

@dataclass(frozen=True, eq=False)
class Dataset:
    """Numeric columns with one designated target.

    ``columns`` has shape (n_cols, n_rows) so each column is contiguous.
    Expression variables index the input columns, i.e. all columns except
    the target, in order.
    """

    column_names: tuple[str, ...]
    columns: np.ndarray
    target_index: int
    provenance: tuple[str, ...] = ()

    def __post_init__(self):
        cols = np.asarray(self.columns, dtype=float)
        if cols.ndim != 2 or cols.shape[0] != len(self.column_names):
            raise ValueError("columns must be (n_cols, n_rows) matching column_names")
        if not 0 <= self.target_index < len(self.column_names):
            raise ValueError("target_index out of range")
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "column_names", tuple(self.column_names))

    @classmethod
    def from_arrays(cls, X, y, names: Sequence[str] | None = None,
                    target_name: str = "y") -> "Dataset":
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float).reshape(-1)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y row counts differ")
        if names is None:
            names = [f"x{i + 1}" for i in range(X.shape[1])]
        cols = np.vstack([X.T, y[None, :]])
        return cls(tuple(names) + (target_name,), cols, X.shape[1])

    @property
    def row_count(self) -> int:
        return self.columns.shape[1]

    @property
    def target_name(self) -> str:
        return self.column_names[self.target_index]

    @cached_property
    def input_names(self) -> tuple[str, ...]:
        return tuple(n for i, n in enumerate(self.column_names) if i != self.target_index)

    @cached_property
    def input_columns(self) -> np.ndarray:
        return np.ascontiguousarray(np.delete(self.columns, self.target_index, axis=0))

    @property
    def n_inputs(self) -> int:
        return len(self.column_names) - 1

    @property
    def y(self) -> np.ndarray:
        return self.columns[self.target_index]

    @property
    def X(self) -> np.ndarray:
        """Inputs as a (rows, vars) view."""
        return self.input_columns.T

    def column(self, name: str) -> np.ndarray:
        return self.columns[self.column_names.index(name)]

    def take_rows(self, idx) -> "Dataset":
        return Dataset(self.column_names, self.columns[:, idx], self.target_index, self.provenance)

    def select_columns(self, names: Sequence[str], note: str | None = None) -> "Dataset":
        """Keep ``names`` (in the given order); the target must be among them."""
        names = list(names)
        if self.target_name not in names:
            raise ValueError("target column must be retained")
        missing = [n for n in names if n not in self.column_names]
        if missing:
            raise NamedColumnAbsent(f"columns not present: {missing}")
        idx = [self.column_names.index(n) for n in names]
        prov = self.provenance + ((note,) if note else ())
        return Dataset(tuple(names), self.columns[idx], names.index(self.target_name), prov)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update("\x1f".join(self.column_names).encode())
        h.update(str(self.target_index).encode())
        h.update(np.ascontiguousarray(self.columns).tobytes())
        return h.hexdigest()[:16]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.column_names)
            for row in self.columns.T:
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path, target_name: str) -> "Dataset":
        raw = load_table(path, target_name)
        bad = [n for j, n in enumerate(raw.column_names) if not raw.column_is_numeric(j)]
        if bad:
            raise DataError(f"{path}: non-numeric or missing cells in {bad}")
        return cls(tuple(raw.column_names), raw.values.T.copy(),
                   raw.column_names.index(target_name), (f"loaded {path}",))


# --------------------------------------------------------------------------
# cleaning and correlation filtering

@dataclass
class PreprocessReport:
    """Bookkeeping of every dropped column.

    ``retained_count`` counts retained columns including the target, so
    ``retained_count + dropped_count == original_count``.
    """

    original_count: int = 0
    dropped_nan_or_string: list[str] = field(default_factory=list)
    dropped_zero_variance: list[str] = field(default_factory=list)
    dropped_named: list[str] = field(default_factory=list)
    dropped_target_correlated: list[tuple[str, float]] = field(default_factory=list)
    dropped_by_correlation: list[tuple[str, str, float]] = field(default_factory=list)
    retained: list[str] = field(default_factory=list)

    @property
    def retained_count(self) -> int:
        return len(self.retained)

    @property
    def dropped_count(self) -> int:
        return (len(self.dropped_nan_or_string) + len(self.dropped_zero_variance)
                + len(self.dropped_named) + len(self.dropped_target_correlated)
                + len(self.dropped_by_correlation))

    def merge(self, other: "PreprocessReport") -> "PreprocessReport":
        """Combine a later stage's report into this one."""
        return PreprocessReport(
            original_count=self.original_count,
            dropped_nan_or_string=self.dropped_nan_or_string + other.dropped_nan_or_string,
            dropped_zero_variance=self.dropped_zero_variance + other.dropped_zero_variance,
            dropped_named=self.dropped_named + other.dropped_named,
            dropped_target_correlated=self.dropped_target_correlated + other.dropped_target_correlated,
            dropped_by_correlation=self.dropped_by_correlation + other.dropped_by_correlation,
            retained=list(other.retained),
        )

    def to_dict(self) -> dict:
        return {
            "original_count": self.original_count,
            "retained_count": self.retained_count,
            "retained": list(self.retained),
            "dropped_nan_or_string": list(self.dropped_nan_or_string),
            "dropped_zero_variance": list(self.dropped_zero_variance),
            "dropped_named": list(self.dropped_named),
            "dropped_target_correlated": [
                {"column": n, "r": r} for n, r in self.dropped_target_correlated],
            "dropped_by_correlation": [
                {"column": d, "kept": k, "r": r} for d, k, r in self.dropped_by_correlation],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = [
            f"original columns: {self.original_count}",
            f"retained columns (incl. target): {self.retained_count}",
            f"dropped for NaN/string cells: {len(self.dropped_nan_or_string)}",
        ]
        lines += [f"  {n}" for n in self.dropped_nan_or_string]
        lines.append(f"dropped for zero variance: {len(self.dropped_zero_variance)}")
        lines += [f"  {n}" for n in self.dropped_zero_variance]
        if self.dropped_named:
            lines.append(f"dropped by name: {', '.join(self.dropped_named)}")
        lines.append(f"dropped for correlation with target: {len(self.dropped_target_correlated)}")
        lines += [f"  {n} (r={r:.4f})" for n, r in self.dropped_target_correlated]
        lines.append(f"dropped as redundant inputs: {len(self.dropped_by_correlation)}")
        lines += [f"  {d} ~ {k} (r={r:.4f})" for d, k, r in self.dropped_by_correlation]
        return "\n".join(lines) + "\n"


def clean_columns(raw: RawTable) -> tuple[Dataset, PreprocessReport]:
    """Drop any column with a missing or non-numeric cell, then any
    constant column. The target must be fully numeric and non-constant."""
    report = PreprocessReport(original_count=len(raw.column_names))
    t = raw.column_names.index(raw.target_name)
    if not raw.column_is_numeric(t):
        raise TargetUnusable(f"target {raw.target_name!r} has missing or non-numeric cells")
    keep = []
    for j, name in enumerate(raw.column_names):
        if not raw.column_is_numeric(j):
            report.dropped_nan_or_string.append(name)
            continue
        col = raw.values[:, j]
        if np.all(col == col[0]):
            if j == t:
                raise TargetUnusable(f"target {raw.target_name!r} is constant")
            report.dropped_zero_variance.append(name)
            continue
        keep.append(j)
    names = tuple(raw.column_names[j] for j in keep)
    ds = Dataset(names, raw.values[:, keep].T.copy(), names.index(raw.target_name),
                 (f"cleaned {raw.source}",))
    report.retained = list(names)
    return ds, report


def pearson_corr(a, b) -> float:
    """Sample Pearson correlation, clipped to [-1, 1]."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("inputs must be 1-D of equal length >= 2")
    da = a - a.mean()
    db = b - b.mean()
    sa = math.sqrt(float(np.dot(da, da)))
    sb = math.sqrt(float(np.dot(db, db)))
    if sa == 0.0 or sb == 0.0:
        raise ConstantInput("correlation undefined for a constant input")
    r = float(np.dot(da, db)) / (sa * sb)
    return min(1.0, max(-1.0, r))


def correlation_matrix(columns: np.ndarray) -> np.ndarray:
    """Pearson matrix for (n_cols, n_rows) data; each column must vary."""
    c = columns - columns.mean(axis=1, keepdims=True)
    norms = np.sqrt(np.einsum("ij,ij->i", c, c))
    if np.any(norms == 0):
        raise ConstantInput("correlation undefined for a constant column")
    z = c / norms[:, None]
    return np.clip(z @ z.T, -1.0, 1.0)


class Experiment(Enum):
    """Correlation-filter presets.

    ONE: drop redundant inputs only. TWO: drop a named column first.
    THREE: first drop inputs highly correlated with the target.
    """

    ONE = 1
    TWO = 2
    THREE = 3


def correlation_filter(data: Dataset, threshold: float = 0.9,
                       mode: Experiment | int = Experiment.ONE,
                       drop_name: str | None = None) -> tuple[Dataset, PreprocessReport]:
    """Greedy first-representative filter on |r| > threshold.

    Inputs are scanned in column order; a column is dropped iff it is
    correlated above the threshold with an already-retained earlier input.
    """
    mode = Experiment(mode)
    report = PreprocessReport(original_count=len(data.column_names))
    names = list(data.column_names)
    target = data.target_name

    if mode is Experiment.TWO:
        if drop_name is None:
            raise ValueError("experiment 2 needs a column name to drop")
        if drop_name not in names or drop_name == target:
            raise NamedColumnAbsent(f"column {drop_name!r} not found among inputs")
        names.remove(drop_name)
        report.dropped_named.append(drop_name)

    inputs = [n for n in names if n != target]
    idx = [data.column_names.index(n) for n in inputs]

    if mode is Experiment.THREE:
        y = data.y
        kept_inputs = []
        for n, j in zip(inputs, idx):
            r = pearson_corr(data.columns[j], y)
            if abs(r) > threshold:
                report.dropped_target_correlated.append((n, r))
            else:
                kept_inputs.append(n)
        inputs = kept_inputs
        idx = [data.column_names.index(n) for n in inputs]

    retained: list[int] = []
    if idx:
        corr = correlation_matrix(data.columns[idx])
        for pos in range(len(idx)):
            hit = None
            for k in retained:
                if abs(corr[pos, k]) > threshold:
                    hit = k
                    break
            if hit is None:
                retained.append(pos)
            else:
                report.dropped_by_correlation.append(
                    (inputs[pos], inputs[hit], float(corr[pos, hit])))

    keep_set = {inputs[p] for p in retained} | {target}
    keep = [n for n in data.column_names if n in keep_set]
    report.retained = keep
    out = data.select_columns(keep, note=f"correlation filter {mode.name} |r|>{threshold}")
    return out, report


def drop_zero_variance(data: Dataset) -> tuple[Dataset, list[str]]:
    dropped = []
    keep = []
    for j, n in enumerate(data.column_names):
        col = data.columns[j]
        if j != data.target_index and col.size and np.all(col == col[0]):
            dropped.append(n)
        else:
            keep.append(n)
    if not dropped:
        return data, []
    return data.select_columns(keep, note="dropped zero-variance columns"), dropped


# --------------------------------------------------------------------------
# split and normalization

def split(data: Dataset, train_frac: float = 0.8,
          rng: np.random.Generator | int | None = None) -> tuple[Dataset, Dataset]:
    """Uniform random row partition: ceil(train_frac*n) training rows.

    Row order inside each part follows the original order.
    """
    n = data.row_count
    if n < 10:
        raise DataError(f"need at least 10 rows to split, got {n}")
    rng = np.random.default_rng(rng)
    n_train = math.ceil(train_frac * n - 1e-9)
    perm = rng.permutation(n)
    tr = np.sort(perm[:n_train])
    te = np.sort(perm[n_train:])
    return data.take_rows(tr), data.take_rows(te)


@dataclass(frozen=True)
class NormalizationParams:
    """Per-column mean and population standard deviation."""

    names: tuple[str, ...]
    mu: tuple[float, ...]
    sigma: tuple[float, ...]
    target_name: str

    def stats(self, name: str) -> tuple[float, float]:
        i = self.names.index(name)
        return self.mu[i], self.sigma[i]

    def to_dict(self) -> dict:
        return {
            "target": self.target_name,
            "columns": [
                {"name": n, "mu": m, "sigma": s}
                for n, m, s in zip(self.names, self.mu, self.sigma)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationParams":
        cols = d["columns"]
        return cls(
            names=tuple(c["name"] for c in cols),
            mu=tuple(float(c["mu"]) for c in cols),
            sigma=tuple(float(c["sigma"]) for c in cols),
            target_name=d["target"],
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "NormalizationParams":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def denormalize_target(self, values) -> np.ndarray:
        mu, sigma = self.stats(self.target_name)
        return np.asarray(values, dtype=float) * sigma + mu


def normalize_fit(train: Dataset) -> NormalizationParams:
    mu = train.columns.mean(axis=1)
    sigma = train.columns.std(axis=1)
    for n, s in zip(train.column_names, sigma):
        if not s > 0:
            raise ZeroSigma(f"column {n!r} has zero variance on the training rows")
    return NormalizationParams(train.column_names, tuple(map(float, mu)),
                               tuple(map(float, sigma)), train.target_name)


def normalize_apply(params: NormalizationParams, data: Dataset) -> Dataset:
    """(x - mu) / sigma with stored statistics, matched by column name."""
    cols = np.empty_like(data.columns)
    for j, n in enumerate(data.column_names):
        mu, sigma = params.stats(n)
        cols[j] = (data.columns[j] - mu) / sigma
    return Dataset(data.column_names, cols, data.target_index,
                   data.provenance + ("normalized with training statistics",))


def denormalize(params: NormalizationParams, data: Dataset) -> Dataset:
    cols = np.empty_like(data.columns)
    for j, n in enumerate(data.column_names):
        mu, sigma = params.stats(n)
        cols[j] = data.columns[j] * sigma + mu
    return Dataset(data.column_names, cols, data.target_index,
                   data.provenance + ("denormalized",))


def align_to(raw: RawTable, names: Sequence[str], target_name: str) -> Dataset:
    """Select retained columns from a raw table (validation/test files).

    Only the retained columns need to be fully numeric.
    """
    missing = [n for n in names if n not in raw.column_names]
    if missing:
        raise NamedColumnAbsent(f"{raw.source}: missing retained columns {missing}")
    idx = [raw.column_names.index(n) for n in names]
    bad = [raw.column_names[j] for j in idx if not raw.column_is_numeric(j)]
    if bad:
        raise DataError(f"{raw.source}: missing or non-numeric cells in retained columns {bad}")
    return Dataset(tuple(names), raw.values[:, idx].T.copy(), list(names).index(target_name),
                   (f"aligned {raw.source}",))
