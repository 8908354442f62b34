"""Sliding-window fraud evaluation with and without the day-cluster feature."""

from __future__ import annotations

import csv
import datetime as dt
import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import clustering, forest
from .dataset import DataError, Feature, TransactionTable
from .metrics import pr_auc, roc_auc
from .shiftmatrix import ShiftMatrix

WINDOW = 7
SHIFT_FEATURE = "day_cluster"


class InfeasibleError(ValueError):
    """The requested experiment cannot run on this data."""


@dataclass(frozen=True)
class FoldSpec:
    train_days: tuple[int, ...]
    gap_days: tuple[int, ...]
    test_days: tuple[int, ...]

    def __post_init__(self):
        days = self.train_days + self.gap_days + self.test_days
        if any(len(w) != WINDOW for w in (self.train_days, self.gap_days, self.test_days)):
            raise ValueError(f"each window must hold {WINDOW} days")
        if list(days) != list(range(days[0], days[0] + 3 * WINDOW)):
            raise ValueError("train, gap and test windows must be consecutive")


def make_folds(n_days: int, n_folds: int = 5, first_test_start: int = 15) -> list[FoldSpec]:
    """Folds whose test windows start ``first_test_start + 7 f``.

    The train window ends 8 days before its test window starts, leaving a
    7-day gap.
    """
    if n_folds < 1:
        raise InfeasibleError("need at least one fold")
    folds = []
    for f in range(n_folds):
        start = first_test_start + WINDOW * f
        train0 = start - 2 * WINDOW
        if train0 < 0 or start + WINDOW > n_days:
            raise InfeasibleError(
                f"fold {f}: windows span days {train0}..{start + WINDOW - 1}, "
                f"outside [0, {n_days})")
        folds.append(FoldSpec(tuple(range(train0, train0 + WINDOW)),
                              tuple(range(start - WINDOW, start)),
                              tuple(range(start, start + WINDOW))))
    return folds


def fold_rows(table: TransactionTable, fold: FoldSpec):
    """Row positions of the (train, gap, test) windows."""
    return tuple(np.flatnonzero(np.isin(table.day_index, w))
                 for w in (fold.train_days, fold.gap_days, fold.test_days))


def inject_shift_feature(table: TransactionTable,
                         assignment: clustering.ClusterAssignment) -> TransactionTable:
    """Copy of ``table`` with the day's cluster appended as a categorical feature."""
    pos = {d: i for i, d in enumerate(assignment.day_dates)}
    missing = [d.isoformat() for d in table.day_dates if d not in pos]
    if missing:
        raise DataError(f"no cluster assignment for day(s) {missing[:5]}")
    day_label = np.array([assignment.labels[pos[d]] for d in table.day_dates], np.float64)
    if assignment.k == 1:
        # a single modality still needs a valid categorical declaration
        feat = Feature(SHIFT_FEATURE, "categorical", 2)
    else:
        feat = Feature(SHIFT_FEATURE, "categorical", assignment.k)
    schema = table.schema.append(feat)
    values = np.column_stack([table.values, day_label[table.day_index]])
    return TransactionTable(schema, table.day_index, values, table.label, table.day_dates,
                            table.row_ids)


def assign_without_leak(m: ShiftMatrix, cutoff: int, k: int,
                        linkage: str = "average") -> clustering.ClusterAssignment:
    """Cluster days before ``cutoff`` only; later days join the cluster with the
    smallest mean distance to its members (ties go to the lower cluster id).
    """
    if not k <= cutoff <= m.n_days:
        raise InfeasibleError(f"cannot form {k} clusters from {cutoff} pre-test days")
    early = m.submatrix(range(cutoff))
    base = clustering.cut(clustering.agglomerate(early, linkage), k, early.day_dates)
    labels = list(base.labels)
    lab = np.array(base.labels)
    for d in range(cutoff, m.n_days):
        means = [m.dist[d, :cutoff][lab == c].mean() for c in range(k)]
        labels.append(int(np.argmin(means)))
    present = sorted(set(labels))
    # k is preserved: every early cluster keeps its id
    assert present == list(range(k))
    return clustering.ClusterAssignment(k, tuple(labels), m.day_dates)


@dataclass(frozen=True)
class FoldResult:
    test_start: dt.date
    test_end: dt.date
    pr_auc_without: float
    pr_auc_with: float
    roc_auc_without: float
    roc_auc_with: float


@dataclass(frozen=True)
class EvalReport:
    folds: tuple[FoldResult, ...]
    mode: str = "full-period"
    notes: tuple[str, ...] = field(default=())

    COLUMNS = ("pr_auc_without", "pr_auc_with", "roc_auc_without", "roc_auc_with")

    def averages(self) -> dict[str, float]:
        return {c: float(np.mean([getattr(f, c) for f in self.folds])) for c in self.COLUMNS}


def _fold_arm(table, fold_index, fold, params):
    train, _, test = fold_rows(table, fold)
    if len(train) == 0 or len(test) == 0:
        raise InfeasibleError(f"fold {fold_index} has an empty window")
    y = table.label[train]
    if y.min() == y.max():
        raise InfeasibleError(f"fold {fold_index}: train window holds a single class")
    y_test = table.label[test]
    if y_test.min() == y_test.max():
        raise InfeasibleError(f"fold {fold_index}: test window holds a single class")
    arm_params = params.with_seed(forest.sub_seed(params.seed, fold_index))
    model = forest.fit(table.values[train], y, arm_params, table.schema,
                       row_ids=table.row_ids[train])
    scores = forest.predict_proba(model, table.values[test])
    return pr_auc((scores, y_test)), roc_auc((scores, y_test))


def _job(args):
    return _fold_arm(*args)


def run_protocol(table: TransactionTable, assignment, folds, params: forest.ForestParams,
                 workers: int = 1, mode: str = "full-period") -> EvalReport:
    """Train/score each fold twice: plain schema and schema + day cluster.

    ``assignment`` is one ClusterAssignment for all folds, a list with one per
    fold, or None (then only the plain arm runs and "with" equals "without").
    Both arms of a fold share a forest seed.
    """
    folds = list(folds)
    if not folds:
        raise InfeasibleError("no folds")
    if assignment is None or isinstance(assignment, clustering.ClusterAssignment):
        per_fold = [assignment] * len(folds)
    else:
        per_fold = list(assignment)
        if len(per_fold) != len(folds):
            raise ValueError("need one assignment per fold")
    injected = {}
    jobs = []
    for f, (fold, a) in enumerate(zip(folds, per_fold)):
        jobs.append((table, f, fold, params))
        if a is not None:
            if id(a) not in injected:
                injected[id(a)] = inject_shift_feature(table, a)
            jobs.append((injected[id(a)], f, fold, params))
    if workers <= 1:
        results = [_job(j) for j in jobs]
    else:
        method = "fork" if "fork" in mp.get_all_start_methods() else "spawn"
        with ProcessPoolExecutor(workers, mp_context=mp.get_context(method)) as ex:
            results = list(ex.map(_job, jobs))

    out, it = [], iter(results)
    for fold, a in zip(folds, per_fold):
        pr0, roc0 = next(it)
        pr1, roc1 = next(it) if a is not None else (pr0, roc0)
        out.append(FoldResult(table.day_dates[fold.test_days[0]],
                              table.day_dates[fold.test_days[-1]], pr0, pr1, roc0, roc1))
    return EvalReport(tuple(out), mode)


# --- output -------------------------------------------------------------------

def write_report_csv(report: EvalReport, path: str | Path, header=()) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for h in header:
            fh.write(f"# {h}\n")
        fh.write(f"# assignment_mode={report.mode}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["test_start", "test_end", *EvalReport.COLUMNS])
        for f in report.folds:
            w.writerow([f.test_start.isoformat(), f.test_end.isoformat(),
                        *(repr(getattr(f, c)) for c in EvalReport.COLUMNS)])
        avg = report.averages()
        w.writerow(["average", "", *(repr(avg[c]) for c in EvalReport.COLUMNS)])


def format_report(report: EvalReport) -> str:
    """Aligned text table: one row per test window plus an average row."""
    lines = [
        f"assignment mode: {report.mode}",
        f"{'':13}|{'PR AUC':^17}|{'ROC AUC':^17}",
        f"{'test set':13}|{'without':>8} {'with':>7} |{'without':>8} {'with':>7}",
        "-" * 13 + "+" + "-" * 17 + "+" + "-" * 17,
    ]

    def row(name, vals):
        a, b, c, d = vals
        return f"{name:13}|{a:8.3f} {b:7.3f} |{c:8.3f} {d:7.3f}"

    for f in report.folds:
        name = f"{f.test_start:%d/%m}-{f.test_end:%d/%m}"
        lines.append(row(name, [getattr(f, c) for c in EvalReport.COLUMNS]))
    lines.append("-" * 13 + "+" + "-" * 17 + "+" + "-" * 17)
    avg = report.averages()
    lines.append(row("average", [avg[c] for c in EvalReport.COLUMNS]))
    lines.extend(report.notes)
    return "\n".join(lines) + "\n"
