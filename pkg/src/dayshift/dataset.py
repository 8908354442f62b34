"""Data model for labeled, day-indexed transactions plus CSV/schema I/O."""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

KINDS = ("continuous", "categorical", "binary")


class DataError(ValueError):
    """Raised for malformed datasets or schema files."""


@dataclass(frozen=True)
class Feature:
    name: str
    kind: str
    cardinality: int | None = None

    def __post_init__(self):
        if not self.name or not self.name.strip():
            raise DataError("feature name must be non-empty")
        if self.kind not in KINDS:
            raise DataError(f"unknown feature kind {self.kind!r} for {self.name!r}")
        if self.kind == "categorical":
            if self.cardinality is None or self.cardinality < 2:
                raise DataError(f"categorical feature {self.name!r} needs cardinality >= 2")
        elif self.cardinality is not None:
            raise DataError(f"{self.kind} feature {self.name!r} takes no cardinality")

    @property
    def n_categories(self) -> int:
        """Number of categories used by split code; 0 for continuous features."""
        if self.kind == "continuous":
            return 0
        if self.kind == "binary":
            return 2
        return self.cardinality


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[Feature, ...]

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise DataError(f"duplicate feature names: {dup}")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    def category_counts(self) -> np.ndarray:
        """Per-feature category count (0 marks a continuous feature)."""
        return np.array([f.n_categories for f in self.features], dtype=np.int64)

    def append(self, feature: Feature) -> "FeatureSchema":
        if feature.name in self.names:
            raise DataError(f"feature name collision: {feature.name!r}")
        return FeatureSchema(self.features + (feature,))


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TransactionTable:
    """Immutable table of transactions.

    ``values`` is a float64 matrix; categorical and binary columns hold
    integer codes. ``day_dates[d]`` is the calendar date of day index ``d``.
    """

    schema: FeatureSchema
    day_index: np.ndarray
    values: np.ndarray
    label: np.ndarray
    day_dates: tuple[dt.date, ...]
    row_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        day_index = np.asarray(self.day_index, dtype=np.int64)
        values = np.asarray(self.values, dtype=np.float64)
        label = np.asarray(self.label, dtype=np.int8)
        dates = tuple(self.day_dates)
        n = len(day_index)
        if values.ndim != 2 or values.shape != (n, len(self.schema)):
            raise DataError(
                f"values shape {values.shape} does not match {n} rows x {len(self.schema)} features")
        if label.shape != (n,):
            raise DataError("label length does not match row count")
        if n == 0:
            raise DataError("table has no rows")
        if not np.isin(label, (0, 1)).all():
            raise DataError("labels must be 0 or 1")
        if not np.isfinite(values).all():
            raise DataError("non-finite feature value")
        n_days = len(dates)
        counts = np.bincount(day_index, minlength=n_days) if day_index.min() >= 0 else None
        if counts is None or len(counts) != n_days or (counts == 0).any():
            raise DataError("day_index must cover a contiguous range 0..N_days-1 with no empty day")
        for a, b in zip(dates, dates[1:]):
            if b - a != dt.timedelta(days=1):
                raise DataError(f"non-consecutive dates: {a} -> {b}")
        for j, feat in enumerate(self.schema.features):
            c = feat.n_categories
            if c:
                col = values[:, j]
                bad = np.flatnonzero((col != np.floor(col)) | (col < 0) | (col >= c))
                if len(bad):
                    raise DataError(
                        f"row {int(bad[0])}: value {col[bad[0]]!r} of feature {feat.name!r} "
                        f"outside [0, {c})")
        row_ids = np.arange(n, dtype=np.int64) if self.row_ids is None else np.asarray(
            self.row_ids, dtype=np.int64)
        if row_ids.shape != (n,) or len(np.unique(row_ids)) != n:
            raise DataError("row_ids must be unique, one per row")
        object.__setattr__(self, "day_index", _readonly(day_index))
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "label", _readonly(label))
        object.__setattr__(self, "day_dates", dates)
        object.__setattr__(self, "row_ids", _readonly(row_ids))

    @property
    def n_rows(self) -> int:
        return len(self.day_index)

    @property
    def n_days(self) -> int:
        return len(self.day_dates)

    def rows_of_day(self, day: int) -> np.ndarray:
        return np.flatnonzero(self.day_index == day)

    def fingerprint(self) -> str:
        """Content hash used to tie cached artifacts to a dataset."""
        h = hashlib.sha256()
        h.update("|".join(f"{f.name}:{f.kind}:{f.cardinality}" for f in self.schema.features).encode())
        h.update(",".join(d.isoformat() for d in self.day_dates).encode())
        for a in (self.day_index, self.values, self.label, self.row_ids):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def equals(self, other: "TransactionTable") -> bool:
        return (
            self.schema == other.schema
            and self.day_dates == other.day_dates
            and np.array_equal(self.day_index, other.day_index)
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.label, other.label)
        )


@dataclass(frozen=True)
class DaySlice:
    day_index: int
    row_ids: np.ndarray


def slice_by_day(table: TransactionTable) -> list[DaySlice]:
    order = np.argsort(table.day_index, kind="stable")
    bounds = np.searchsorted(table.day_index[order], np.arange(table.n_days + 1))
    slices = []
    for d in range(table.n_days):
        rows = order[bounds[d]:bounds[d + 1]]
        assert len(rows) > 0, f"day {d} is empty"
        slices.append(DaySlice(d, rows))
    return slices


# --- schema files -----------------------------------------------------------

def parse_schema(lines: Iterable[str]) -> FeatureSchema:
    feats = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        try:
            if len(parts) == 2:
                feats.append(Feature(parts[0], parts[1]))
            elif len(parts) == 3:
                feats.append(Feature(parts[0], parts[1], int(parts[2])))
            else:
                raise DataError("expected name,kind[,cardinality]")
        except (DataError, ValueError) as e:
            raise DataError(f"schema line {lineno}: {e}") from None
    if not feats:
        raise DataError("schema declares no features")
    return FeatureSchema(tuple(feats))


def load_schema(path: str | Path) -> FeatureSchema:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"schema file not found: {path}")
    return parse_schema(path.read_text(encoding="utf-8").splitlines())


def write_schema(schema: FeatureSchema, path: str | Path, header: Sequence[str] = ()) -> None:
    lines = [f"# {h}" for h in header]
    for f in schema.features:
        lines.append(f"{f.name},{f.kind},{f.cardinality}" if f.kind == "categorical"
                     else f"{f.name},{f.kind}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --- dataset CSV --------------------------------------------------------------

def _format_value(v: float, kind: str) -> str:
    return repr(float(v)) if kind == "continuous" else str(int(v))


def write_csv(table: TransactionTable, path: str | Path, header: Sequence[str] = ()) -> None:
    """Write the table; rows are emitted in row-id order.

    ``header`` lines are written as leading ``#`` comments.
    """
    kinds = [f.kind for f in table.schema.features]
    order = np.argsort(table.row_ids, kind="stable")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for h in header:
            fh.write(f"# {h}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "label", *table.schema.names])
        dates = [d.isoformat() for d in table.day_dates]
        for r in order:
            w.writerow([dates[table.day_index[r]], int(table.label[r]),
                        *(_format_value(v, k) for v, k in zip(table.values[r], kinds))])


def load_csv(path: str | Path, schema_path: str | Path) -> TransactionTable:
    """Load and validate a dataset CSV against its schema file.

    Days are numbered in ascending date order. Any malformed row is an error.
    """
    schema = load_schema(schema_path)
    path = Path(path)
    if not path.is_file():
        raise DataError(f"dataset file not found: {path}")
    expected = ["date", "label", *schema.names]
    dates, labels, rows = [], [], []
    with open(path, encoding="utf-8", newline="") as fh:
        lines = (ln for ln in fh if not ln.startswith("#"))
        reader = csv.reader(lines)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != expected:
            raise DataError(f"header {header} does not match expected {expected}")
        kinds = [(f.name, f.kind, f.n_categories) for f in schema.features]
        for rowno, rec in enumerate(reader, 1):
            if len(rec) != len(expected):
                raise DataError(f"row {rowno}: expected {len(expected)} fields, got {len(rec)}")
            try:
                dates.append(dt.date.fromisoformat(rec[0]))
            except ValueError:
                raise DataError(f"row {rowno}: bad date {rec[0]!r}") from None
            if rec[1] not in ("0", "1"):
                raise DataError(f"row {rowno}: label must be 0 or 1, got {rec[1]!r}")
            labels.append(int(rec[1]))
            vals = []
            for text, (name, kind, ncat) in zip(rec[2:], kinds):
                try:
                    v = float(text) if kind == "continuous" else int(text)
                except ValueError:
                    raise DataError(f"row {rowno}: feature {name!r} has bad value {text!r}") from None
                if kind == "continuous" and not math.isfinite(v):
                    raise DataError(f"row {rowno}: feature {name!r} is non-finite")
                if kind != "continuous" and not 0 <= v < ncat:
                    raise DataError(
                        f"row {rowno}: feature {name!r} value {v} outside [0, {ncat})")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise DataError("dataset has no rows")
    uniq = sorted(set(dates))
    for a, b in zip(uniq, uniq[1:]):
        if b - a != dt.timedelta(days=1):
            raise DataError(f"non-consecutive dates: {a} -> {b}")
    pos = {d: i for i, d in enumerate(uniq)}
    return TransactionTable(
        schema=schema,
        day_index=np.array([pos[d] for d in dates], dtype=np.int64),
        values=np.array(rows, dtype=np.float64),
        label=np.array(labels, dtype=np.int8),
        day_dates=tuple(uniq),
    )
