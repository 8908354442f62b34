"""Day-by-day covariate shift matrix from pairwise "which day?" forests."""

from __future__ import annotations

import csv
import datetime as dt
import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import forest
from .dataset import DataError, TransactionTable
from .metrics import confusion, mcc

MIN_DAY_ROWS = 20


class PairError(DataError):
    def __init__(self, pair, msg):
        super().__init__(f"pair {pair}: {msg}")
        self.pair = pair
        self.msg = msg

    def __reduce__(self):  # keep the pair when crossing process boundaries
        return (PairError, (self.pair, self.msg))


@dataclass(frozen=True)
class PairProtocol:
    n_train_per_day: int = 20000
    n_test_per_day: int = 5000
    forest: forest.ForestParams = field(default_factory=forest.ForestParams)
    seed: int = 0
    repeats: int = 1

    def __post_init__(self):
        if self.n_train_per_day < 1 or self.n_test_per_day < 1:
            raise ValueError("per-day train and test sizes must be >= 1")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")

    def describe(self) -> dict[str, str]:
        f = self.forest
        return {
            "n_train_per_day": str(self.n_train_per_day),
            "n_test_per_day": str(self.n_test_per_day),
            "repeats": str(self.repeats),
            "seed": str(self.seed),
            "n_trees": str(f.n_trees),
            "max_features": str(f.max_features),
            "min_samples_leaf": str(f.min_samples_leaf),
            "bootstrap": str(f.bootstrap),
        }


def split_sizes(n_a: int, n_b: int, proto: PairProtocol) -> tuple[int, int]:
    """Per-day (train, test) counts, shrunk to the smaller day keeping the ratio."""
    total = proto.n_train_per_day + proto.n_test_per_day
    budget = min(total, n_a, n_b)
    n_train = round(budget * proto.n_train_per_day / total)
    n_train = min(max(n_train, 1), budget - 1)
    return n_train, budget - n_train


def pair_shift(table: TransactionTable, day_i: int, day_j: int, proto: PairProtocol) -> float:
    """MCC of a forest telling day_i rows from day_j rows on held-out data.

    The pair is handled in canonical (low, high) order, so the result does not
    depend on argument order. Fraud labels are not used.
    """
    a, b = sorted((int(day_i), int(day_j)))
    if a == b:
        raise PairError((a, b), "a day cannot be compared with itself")
    if a < 0 or b >= table.n_days:
        raise PairError((a, b), f"day index outside [0, {table.n_days})")
    rows_a, rows_b = table.rows_of_day(a), table.rows_of_day(b)
    for d, rows in ((a, rows_a), (b, rows_b)):
        if len(rows) < MIN_DAY_ROWS:
            raise PairError((a, b), f"day {d} has {len(rows)} rows, need >= {MIN_DAY_ROWS}")
    # canonical row order before sampling
    rows_a = rows_a[np.argsort(table.row_ids[rows_a], kind="stable")]
    rows_b = rows_b[np.argsort(table.row_ids[rows_b], kind="stable")]
    n_tr, n_te = split_sizes(len(rows_a), len(rows_b), proto)
    budget = n_tr + n_te
    y_tr = np.repeat(np.array([0, 1], np.int8), n_tr)
    y_te = np.repeat(np.array([0, 1], np.int8), n_te)

    values = []
    for r in range(proto.repeats):
        rng = np.random.default_rng(np.random.SeedSequence(
            [int(proto.seed) % 2**64, a, b, r]))
        sa = rng.choice(rows_a, budget, replace=False)
        sb = rng.choice(rows_b, budget, replace=False)
        train = np.concatenate([sa[:n_tr], sb[:n_tr]])
        test = np.concatenate([sa[n_tr:], sb[n_tr:]])
        params = proto.forest.with_seed(forest.sub_seed(proto.seed, a, b, r))
        model = forest.fit(table.values[train], y_tr, params, table.schema,
                           row_ids=table.row_ids[train])
        values.append(mcc(confusion(forest.predict(model, table.values[test]), y_te)))
    return float(np.mean(values))


@dataclass(frozen=True, eq=False)
class ShiftMatrix:
    n_days: int
    dist: np.ndarray
    raw_mcc: np.ndarray
    day_dates: tuple[dt.date, ...]

    def __post_init__(self):
        n = self.n_days
        for a in (self.dist, self.raw_mcc):
            if a.shape != (n, n):
                raise ValueError(f"matrix shape {a.shape} != ({n}, {n})")
            if not np.array_equal(a, a.T):
                raise ValueError("matrix is not symmetric")
            if np.any(np.diag(a) != 0):
                raise ValueError("matrix diagonal is not zero")
        if len(self.day_dates) != n:
            raise ValueError("day_dates length mismatch")

    @classmethod
    def from_raw(cls, raw: np.ndarray, day_dates) -> "ShiftMatrix":
        raw = np.array(raw, dtype=np.float64)
        return cls(len(raw), np.maximum(raw, 0.0), raw, tuple(day_dates))

    def submatrix(self, days) -> "ShiftMatrix":
        days = np.asarray(days)
        return ShiftMatrix.from_raw(self.raw_mcc[np.ix_(days, days)],
                                    [self.day_dates[d] for d in days])


def all_pairs(n_days: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n_days) for j in range(i + 1, n_days)]


_WORKER_STATE = {}


def _init_worker(table, proto):
    _WORKER_STATE["job"] = (table, proto)


def _pair_job(pair):
    table, proto = _WORKER_STATE["job"]
    try:
        return pair_shift(table, pair[0], pair[1], proto)
    except PairError:
        raise
    except Exception as e:  # surface the offending pair from worker processes
        raise PairError(pair, repr(e)) from e


def build_matrix(table: TransactionTable, proto: PairProtocol, workers: int = 1,
                 progress: Callable[[int, int], None] | None = None) -> ShiftMatrix:
    """Compute every unordered day pair; results do not depend on ``workers``."""
    if table.n_days < 2:
        raise DataError("need at least two days to build a shift matrix")
    pairs = all_pairs(table.n_days)
    raw = np.zeros((table.n_days, table.n_days))

    def record(k, pair, value):
        i, j = pair
        raw[i, j] = raw[j, i] = value
        if progress is not None:
            progress(k + 1, len(pairs))

    if workers <= 1:
        _init_worker(table, proto)
        try:
            for k, pair in enumerate(pairs):
                record(k, pair, _pair_job(pair))
        finally:
            _WORKER_STATE.clear()
    else:
        method = "fork" if "fork" in mp.get_all_start_methods() else "spawn"
        with ProcessPoolExecutor(workers, mp_context=mp.get_context(method),
                                 initializer=_init_worker, initargs=(table, proto)) as ex:
            chunk = max(1, len(pairs) // (workers * 16))
            for k, (pair, value) in enumerate(zip(pairs, ex.map(_pair_job, pairs,
                                                                chunksize=chunk))):
                record(k, pair, value)
    return ShiftMatrix.from_raw(raw, table.day_dates)


# --- files ----------------------------------------------------------------------

def _write_square(path, a: np.ndarray, dates, header):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for h in header:
            fh.write(f"# {h}\n")
        w = csv.writer(fh, lineterminator="\n")
        iso = [d.isoformat() for d in dates]
        w.writerow(["date", *iso])
        for d, row in zip(iso, a):
            w.writerow([d, *(repr(float(v)) for v in row)])


def _read_square(path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(ln for ln in fh if not ln.startswith("#"))
        head = next(reader, None)
        if not head or head[0] != "date":
            raise DataError(f"{path}: bad matrix header")
        dates = [dt.date.fromisoformat(d) for d in head[1:]]
        rows = []
        for rec, d in zip(reader, dates):
            if dt.date.fromisoformat(rec[0]) != d:
                raise DataError(f"{path}: row/column dates disagree at {rec[0]}")
            rows.append([float(v) for v in rec[1:]])
    a = np.array(rows)
    if a.shape != (len(dates), len(dates)):
        raise DataError(f"{path}: matrix is not square")
    return a, dates


def companion_paths(path: str | Path) -> tuple[Path, Path]:
    """``.raw.csv`` and ``.meta`` paths next to a matrix CSV."""
    path = Path(path)
    stem = path.name[:-4] if path.name.endswith(".csv") else path.name
    return path.with_name(stem + ".raw.csv"), path.with_name(stem + ".meta")


def write_meta(path: str | Path, meta: Mapping[str, str]) -> None:
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in meta.items()), encoding="utf-8")


def read_meta(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            key, _, val = line.partition("=")
            out[key.strip()] = val.strip()
    return out


def write_matrix(m: ShiftMatrix, path: str | Path, meta: Mapping[str, str],
                 header=()) -> None:
    raw_path, meta_path = companion_paths(path)
    header = list(header) + [f"{k}={v}" for k, v in meta.items()]
    _write_square(path, m.dist, m.day_dates, header)
    _write_square(raw_path, m.raw_mcc, m.day_dates, header)
    write_meta(meta_path, meta)


def read_matrix(path: str | Path) -> ShiftMatrix:
    raw_path, _ = companion_paths(path)
    dist, dates = _read_square(path)
    if Path(raw_path).is_file():
        raw, raw_dates = _read_square(raw_path)
        if raw_dates != dates:
            raise DataError("matrix and raw companion disagree on dates")
        m = ShiftMatrix.from_raw(raw, dates)
        if not np.array_equal(m.dist, dist):
            raise DataError("matrix does not equal max(0, raw MCC)")
        return m
    return ShiftMatrix(len(dates), dist, dist.copy(), tuple(dates))
