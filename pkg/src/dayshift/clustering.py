"""Agglomerative clustering of days over a ShiftMatrix."""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .shiftmatrix import ShiftMatrix

LINKAGES = ("average", "single", "complete")
_TIE_RTOL = 1e-12


@dataclass(frozen=True)
class Merge:
    left: int
    right: int
    height: float
    size: int


@dataclass(frozen=True)
class Dendrogram:
    """Merge tree; leaves are ``0..n-1`` and merge ``m`` creates node ``n + m``."""

    n_leaves: int
    merges: tuple[Merge, ...]
    linkage: str = "average"

    def __post_init__(self):
        if len(self.merges) != self.n_leaves - 1:
            raise ValueError(f"{self.n_leaves} leaves need {self.n_leaves - 1} merges")
        used = [c for m in self.merges for c in (m.left, m.right)]
        if sorted(used) != list(range(2 * self.n_leaves - 2)):
            raise ValueError("every node except the root must be merged exactly once")

    @property
    def heights(self) -> np.ndarray:
        return np.array([m.height for m in self.merges])


@dataclass(frozen=True)
class ClusterAssignment:
    k: int
    labels: tuple[int, ...]
    day_dates: tuple[dt.date, ...]

    def __post_init__(self):
        if len(self.labels) != len(self.day_dates):
            raise ValueError("labels and day_dates differ in length")
        if sorted(set(self.labels)) != list(range(self.k)):
            raise ValueError(f"labels must use exactly the ids 0..{self.k - 1}")


def canonical_labels(raw) -> list[int]:
    """Relabel so ids appear in order of each cluster's earliest day."""
    mapping = {}
    out = []
    for r in raw:
        if r not in mapping:
            mapping[r] = len(mapping)
        out.append(mapping[r])
    return out


def _validate(dist: np.ndarray) -> None:
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise ValueError("distance matrix must be square")
    if not np.array_equal(dist, dist.T):
        raise ValueError("distance matrix must be symmetric")
    if (dist < 0).any():
        raise ValueError("distance matrix has negative entries")
    if np.any(np.diag(dist) != 0):
        raise ValueError("distance matrix diagonal must be zero")


def agglomerate(m: ShiftMatrix | np.ndarray, linkage: str = "average") -> Dendrogram:
    """Naive O(n^3) agglomeration with Lance-Williams updates.

    Near-equal candidate distances (relative 1e-12) are ties, resolved by the
    lowest (smallest member, smallest member) pair of the two clusters.
    """
    if linkage not in LINKAGES:
        raise ValueError(f"unknown linkage {linkage!r}")
    dist = np.array(m.dist if isinstance(m, ShiftMatrix) else m, dtype=np.float64)
    _validate(dist)
    n = len(dist)
    if n < 2:
        raise ValueError("need at least two days")

    D = dist.copy()
    np.fill_diagonal(D, np.inf)
    active = np.ones(n, bool)
    node_id = list(range(n))
    size = np.ones(n, np.int64)
    first = np.arange(n)  # smallest member of each slot's cluster
    merges = []
    last_h = 0.0
    for step in range(n - 1):
        sub = D[np.ix_(active, active)]
        slots = np.flatnonzero(active)
        dmin = sub.min()
        ii, jj = np.nonzero(sub <= dmin + _TIE_RTOL * max(1.0, abs(dmin)))
        keys = [tuple(sorted((first[slots[i]], first[slots[j]]))) for i, j in zip(ii, jj)]
        best = min(range(len(keys)), key=keys.__getitem__)
        a, b = slots[ii[best]], slots[jj[best]]
        if first[a] > first[b]:
            a, b = b, a
        # clamp float jitter so heights stay monotone
        h = max(float(D[a, b]), last_h)
        last_h = h
        merges.append(Merge(node_id[a], node_id[b], h, int(size[a] + size[b])))

        if linkage == "average":
            new = (size[a] * D[a] + size[b] * D[b]) / (size[a] + size[b])
        elif linkage == "single":
            new = np.minimum(D[a], D[b])
        else:
            new = np.maximum(D[a], D[b])
        D[a, :] = new
        D[:, a] = new
        D[a, a] = np.inf
        D[b, :] = np.inf
        D[:, b] = np.inf
        active[b] = False
        size[a] += size[b]
        first[a] = min(first[a], first[b])
        node_id[a] = n + step
    return Dendrogram(n, tuple(merges), linkage)


def cut(d: Dendrogram, k: int, day_dates=None) -> ClusterAssignment:
    """Flat k-cluster partition obtained by undoing the last k-1 merges."""
    n = d.n_leaves
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    parent = list(range(2 * n - 1))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for step, mg in enumerate(d.merges[: n - k]):
        parent[find(mg.left)] = n + step
        parent[find(mg.right)] = n + step
    labels = canonical_labels([find(i) for i in range(n)])
    if day_dates is None:
        day_dates = tuple(dt.date(1970, 1, 1) + dt.timedelta(days=i) for i in range(n))
    return ClusterAssignment(k, tuple(labels), tuple(day_dates))


def intercluster_curve(m: ShiftMatrix, d: Dendrogram, k_max: int) -> list[tuple[int, float]]:
    """Average distance over day pairs split across clusters, for k = 2..k_max."""
    n = m.n_days
    if not 2 <= k_max <= n:
        raise ValueError(f"k_max={k_max} outside [2, {n}]")
    iu = np.triu_indices(n, 1)
    vals = m.dist[iu]
    out = []
    for k in range(2, k_max + 1):
        lab = np.array(cut(d, k, m.day_dates).labels)
        cross = lab[iu[0]] != lab[iu[1]]
        out.append((k, float(vals[cross].mean())))
    return out


def compare_assignments(a, truth) -> float:
    """Adjusted Rand index between two labelings of the same days."""
    la = np.asarray(a.labels if isinstance(a, ClusterAssignment) else a)
    lb = np.asarray(truth.labels if isinstance(truth, ClusterAssignment) else truth)
    if la.shape != lb.shape:
        raise ValueError("assignments cover different numbers of days")
    n = len(la)
    _, ia = np.unique(la, return_inverse=True)
    _, ib = np.unique(lb, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), np.int64)
    np.add.at(table, (ia, ib), 1)

    def pairs(x):
        x = np.asarray(x, dtype=np.float64)
        return float(np.sum(x * (x - 1) / 2))

    sum_ij = pairs(table)
    sum_a, sum_b = pairs(table.sum(1)), pairs(table.sum(0))
    total = n * (n - 1) / 2
    expected = sum_a * sum_b / total if total else 0.0
    max_index = (sum_a + sum_b) / 2
    if max_index == expected:
        # both partitions trivial in the same way
        return 1.0
    return (sum_ij - expected) / (max_index - expected)


# --- exports ----------------------------------------------------------------------

def to_newick(d: Dendrogram, names=None) -> str:
    """Newick text; branch lengths are height differences, internal nodes carry heights."""
    n = d.n_leaves
    names = [str(i) for i in range(n)] if names is None else [str(x) for x in names]
    height = [0.0] * n + [m.height for m in d.merges]
    children = {n + s: (m.left, m.right) for s, m in enumerate(d.merges)}

    def render(node, parent_h):
        if node < n:
            return f"{names[node]}:{parent_h - height[node]!r}"
        l, r = children[node]
        h = height[node]
        return f"({render(l, h)},{render(r, h)})h{h!r}:{parent_h - h!r}"

    root = 2 * n - 2
    l, r = children[root]
    return f"({render(l, height[root])},{render(r, height[root])})h{height[root]!r};"


def write_assignment(a: ClusterAssignment, path: str | Path, header=()) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for h in header:
            fh.write(f"# {h}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "cluster"])
        for d, lab in zip(a.day_dates, a.labels):
            w.writerow([d.isoformat(), lab])


def read_assignment(path: str | Path) -> ClusterAssignment:
    dates, labels = [], []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(ln for ln in fh if not ln.startswith("#"))
        if next(reader, None) != ["date", "cluster"]:
            raise ValueError(f"{path}: expected header date,cluster")
        for rec in reader:
            dates.append(dt.date.fromisoformat(rec[0]))
            labels.append(int(rec[1]))
    return ClusterAssignment(len(set(labels)), tuple(labels), tuple(dates))


def write_curve(curve, path: str | Path, header=()) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for h in header:
            fh.write(f"# {h}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "avg_intercluster_distance"])
        for k, v in curve:
            w.writerow([k, repr(v)])


def weekly_grid(a: ClusterAssignment) -> str:
    """Assignment laid out as ISO-week rows by MON..SUN columns."""
    by_week = {}
    for d, lab in zip(a.day_dates, a.labels):
        year, week, wd = d.isocalendar()
        by_week.setdefault((year, week), [""] * 7)[wd - 1] = str(lab)
    lines = ["Week | MON TUE WED THU FRI SAT SUN", "-----+----------------------------"]
    for (year, week), cells in sorted(by_week.items()):
        lines.append(f"{week:>4} | " + " ".join(f"{c:>3}" for c in cells).rstrip())
    return "\n".join(lines) + "\n"
