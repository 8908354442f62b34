"""Binary random forest with Gini splits, grown by numba kernels.

Trees are stored flat: ``feature[node] == -1`` marks a leaf. Continuous
splits send ``x <= threshold`` left; categorical splits send ``x`` left when
bit ``x`` of ``catmask[node]`` is set. Every tree holds per-node class counts
from its (bootstrap) training sample.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Union

import numba
import numpy as np

from .dataset import FeatureSchema

FORMAT_VERSION = 1
MAX_CATEGORIES = 63
_MIN_GAIN = 1e-12


def gini_impurity(counts) -> float:
    n0, n1 = counts
    total = n0 + n1
    if n0 < 0 or n1 < 0 or total == 0:
        raise ValueError("gini_impurity needs non-negative counts with a positive total")
    p0, p1 = n0 / total, n1 / total
    return 1.0 - p0 * p0 - p1 * p1


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_features: Union[str, int] = "sqrt"
    min_samples_leaf: int = 10
    seed: int = 0
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be positive")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be positive")
        if isinstance(self.max_features, str) and self.max_features != "sqrt":
            raise ValueError(f"unknown max_features rule {self.max_features!r}")

    def features_per_split(self, n_features: int) -> int:
        if self.max_features == "sqrt":
            k = max(1, int(math.isqrt(n_features)))
        else:
            k = int(self.max_features)
        if not 1 <= k <= n_features:
            raise ValueError(f"max_features resolves to {k}, outside [1, {n_features}]")
        return k

    def with_seed(self, seed: int) -> "ForestParams":
        return ForestParams(self.n_trees, self.max_features, self.min_samples_leaf, seed,
                            self.bootstrap)


def sub_seed(*key: int) -> int:
    """Derive a 32-bit seed from an integer key tuple (order matters)."""
    ss = np.random.SeedSequence([int(k) % 2**64 for k in key])
    return int(ss.generate_state(1, np.uint32)[0])


# --- kernels ------------------------------------------------------------------

@numba.njit(cache=True)
def _grow_tree(R, uniq, uoff, y, ncat, mtry, min_leaf, bootstrap, seed):
    np.random.seed(seed)
    n, k = R.shape
    if bootstrap:
        rows = np.random.randint(0, n, n)
    else:
        rows = np.arange(n)
    # per-position copies of the sampled rows
    Rb = np.empty((n, k), np.int64)
    yb = np.empty(n, np.int64)
    for p in range(n):
        yb[p] = y[rows[p]]
        for f in range(k):
            Rb[p, f] = R[rows[p], f]

    # S[f] lists sample positions; for continuous f it is sorted by value
    # (counting sort on dense ranks) and stays sorted within every node
    # segment because splits partition it stably. S[k] is a plain list.
    S = np.empty((k + 1, n), np.int64)
    for f in range(k):
        if ncat[f] == 0:
            nu = (uoff[f + 1] - uoff[f])
            cnt = np.zeros(nu + 1, np.int64)
            for p in range(n):
                cnt[Rb[p, f] + 1] += 1
            for u in range(nu):
                cnt[u + 1] += cnt[u]
            for p in range(n):
                r = Rb[p, f]
                S[f, cnt[r]] = p
                cnt[r] += 1
    for p in range(n):
        S[k, p] = p

    cap = 2 * n + 1
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap, np.float64)
    catmask = np.zeros(cap, np.int64)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    count0 = np.zeros(cap, np.int64)
    count1 = np.zeros(cap, np.int64)

    st_node = np.empty(cap, np.int64)
    st_lo = np.empty(cap, np.int64)
    st_hi = np.empty(cap, np.int64)
    st_node[0] = 0
    st_lo[0] = 0
    st_hi[0] = n
    top = 1
    n_nodes = 1

    perm = np.arange(k)
    cand = np.empty(k, np.int64)
    buf = np.empty(n, np.int64)
    goes_left = np.zeros(n, np.bool_)
    maxc = 2
    for f in range(k):
        if ncat[f] > maxc:
            maxc = ncat[f]
    c0 = np.zeros(maxc, np.int64)
    c1 = np.zeros(maxc, np.int64)
    ratio = np.empty(maxc, np.float64)
    cats = np.empty(maxc, np.int64)

    while top > 0:
        top -= 1
        node = st_node[top]
        lo = st_lo[top]
        hi = st_hi[top]
        m = hi - lo
        n1 = 0
        for i in range(lo, hi):
            n1 += yb[S[k, i]]
        n0 = m - n1
        count0[node] = n0
        count1[node] = n1
        if n0 == 0 or n1 == 0 or m < 2 * min_leaf:
            continue

        # partial Fisher-Yates draw of candidate features, scanned in index order
        for i in range(k):
            perm[i] = i
        for i in range(mtry):
            j = np.random.randint(i, k)
            t = perm[i]
            perm[i] = perm[j]
            perm[j] = t
        for i in range(mtry):
            v = perm[i]
            j = i
            while j > 0 and cand[j - 1] > v:
                cand[j] = cand[j - 1]
                j -= 1
            cand[j] = v

        parent = (n0 * n0 + n1 * n1) / m
        best_gain = _MIN_GAIN
        best_f = -1
        best_rank = 0
        best_thr = 0.0
        best_mask = 0
        for ci in range(mtry):
            f = cand[ci]
            if ncat[f] == 0:
                l0 = 0
                l1 = 0
                for s in range(lo, hi - 1):
                    p = S[f, s]
                    if yb[p] == 1:
                        l1 += 1
                    else:
                        l0 += 1
                    nl = s - lo + 1
                    nr = m - nl
                    if nl < min_leaf:
                        continue
                    if nr < min_leaf:
                        break
                    ra = Rb[p, f]
                    rb = Rb[S[f, s + 1], f]
                    if ra == rb:
                        continue
                    r0 = n0 - l0
                    r1 = n1 - l1
                    score = (l0 * l0 + l1 * l1) / nl + (r0 * r0 + r1 * r1) / nr
                    gain = (score - parent) / m
                    if gain > best_gain:
                        a = uniq[uoff[f] + ra]
                        b = uniq[uoff[f] + rb]
                        thr = 0.5 * (a + b)
                        if thr >= b:
                            thr = a
                        best_gain = gain
                        best_f = f
                        best_rank = ra
                        best_thr = thr
            else:
                nc = ncat[f]
                for c in range(nc):
                    c0[c] = 0
                    c1[c] = 0
                for i in range(lo, hi):
                    p = S[k, i]
                    c = Rb[p, f]
                    if yb[p] == 1:
                        c1[c] += 1
                    else:
                        c0[c] += 1
                q = 0
                for c in range(nc):
                    if c0[c] + c1[c] > 0:
                        cats[q] = c
                        ratio[q] = c1[c] / (c0[c] + c1[c])
                        q += 1
                if q < 2:
                    continue
                # stable sort of present categories by class-1 proportion
                order = np.argsort(ratio[:q], kind="mergesort")
                l0 = 0
                l1 = 0
                mask = 0
                for s in range(q - 1):
                    c = cats[order[s]]
                    l0 += c0[c]
                    l1 += c1[c]
                    mask |= 1 << c
                    nl = l0 + l1
                    nr = m - nl
                    if nl < min_leaf or nr < min_leaf:
                        continue
                    r0 = n0 - l0
                    r1 = n1 - l1
                    score = (l0 * l0 + l1 * l1) / nl + (r0 * r0 + r1 * r1) / nr
                    gain = (score - parent) / m
                    if gain > best_gain:
                        best_gain = gain
                        best_f = f
                        best_mask = mask
        if best_f < 0:
            continue

        nl = 0
        for i in range(lo, hi):
            p = S[k, i]
            if ncat[best_f] == 0:
                g = Rb[p, best_f] <= best_rank
            else:
                g = ((best_mask >> Rb[p, best_f]) & 1) == 1
            goes_left[p] = g
            if g:
                nl += 1
        # stable partition of every position list segment
        for f in range(k + 1):
            if f < k and ncat[f] != 0:
                continue
            a_ = lo
            b_ = 0
            for i in range(lo, hi):
                p = S[f, i]
                if goes_left[p]:
                    S[f, a_] = p
                    a_ += 1
                else:
                    buf[b_] = p
                    b_ += 1
            for i in range(b_):
                S[f, a_ + i] = buf[i]

        feature[node] = best_f
        threshold[node] = best_thr
        catmask[node] = best_mask
        left[node] = n_nodes
        right[node] = n_nodes + 1
        # push right first so the left subtree is numbered depth-first
        st_node[top] = n_nodes + 1
        st_lo[top] = lo + nl
        st_hi[top] = hi
        top += 1
        st_node[top] = n_nodes
        st_lo[top] = lo
        st_hi[top] = lo + nl
        top += 1
        n_nodes += 2

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), catmask[:n_nodes].copy(),
            left[:n_nodes].copy(), right[:n_nodes].copy(), count0[:n_nodes].copy(),
            count1[:n_nodes].copy())


@numba.njit(cache=True)
def _votes(X, roots, feature, threshold, catmask, left, right, count0, count1, ncat):
    n = X.shape[0]
    out = np.zeros(n, np.int64)
    for r in range(n):
        v = 0
        for t in range(roots.shape[0]):
            node = roots[t]
            while feature[node] >= 0:
                f = feature[node]
                if ncat[f] == 0:
                    go_left = X[r, f] <= threshold[node]
                else:
                    go_left = ((catmask[node] >> int(X[r, f])) & 1) == 1
                node = left[node] if go_left else right[node]
            if count1[node] >= count0[node]:
                v += 1
        out[r] = v
    return out


# --- model --------------------------------------------------------------------

_ARRAYS = ("feature", "threshold", "catmask", "left", "right", "count0", "count1")


@dataclass(frozen=True)
class Leaf:
    class_counts: tuple[int, int]


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float | None
    categories: frozenset[int] | None
    left: "TreeNode"
    right: "TreeNode"


TreeNode = Union[Leaf, Split]


@dataclass(frozen=True, eq=False)
class ForestModel:
    """Fitted forest; all trees are concatenated into flat node arrays.

    Child indices are absolute positions in the concatenated arrays and
    ``roots[t]`` is the root node of tree ``t``.
    """

    params: ForestParams
    schema: FeatureSchema
    roots: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray
    catmask: np.ndarray
    left: np.ndarray
    right: np.ndarray
    count0: np.ndarray
    count1: np.ndarray

    @property
    def n_trees(self) -> int:
        return len(self.roots)

    def leaf_sizes(self, t: int | None = None) -> np.ndarray:
        leaves = self.feature < 0
        if t is not None:
            end = self.roots[t + 1] if t + 1 < self.n_trees else len(self.feature)
            span = np.zeros_like(leaves)
            span[self.roots[t]:end] = True
            leaves &= span
        return (self.count0 + self.count1)[leaves]

    def tree(self, t: int) -> TreeNode:
        def build(node):
            f = int(self.feature[node])
            if f < 0:
                return Leaf((int(self.count0[node]), int(self.count1[node])))
            if self.schema.features[f].n_categories:
                mask = int(self.catmask[node])
                cats = frozenset(c for c in range(MAX_CATEGORIES) if mask >> c & 1)
                thr = None
            else:
                cats, thr = None, float(self.threshold[node])
            return Split(f, thr, cats, build(self.left[node]), build(self.right[node]))
        return build(int(self.roots[t]))


def _check_X(X, schema: FeatureSchema) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != len(schema):
        raise ValueError(f"rows have {X.shape[-1]} values, schema has {len(schema)} features")
    return X


def _rank_encode(X, ncat):
    """Dense value ranks per continuous column; category codes pass through."""
    R = np.empty(X.shape, np.int64)
    uniqs, uoff = [], np.zeros(X.shape[1] + 1, np.int64)
    pos = 0
    for f in range(X.shape[1]):
        if ncat[f]:
            R[:, f] = X[:, f].astype(np.int64)
            u = np.zeros(0)
        else:
            u, R[:, f] = np.unique(X[:, f], return_inverse=True)
        uoff[f] = pos
        uniqs.append(u)
        pos += len(u)
    uoff[-1] = pos
    return R, np.concatenate(uniqs), uoff


def fit(X, y, params: ForestParams, schema: FeatureSchema, row_ids=None) -> ForestModel:
    """Fit a forest on feature matrix ``X`` and binary labels ``y``.

    When ``row_ids`` is given, rows are first put in row-id order so the
    result does not depend on the order rows were supplied in.
    """
    X = _check_X(X, schema)
    y = np.asarray(y)
    if len(X) == 0:
        raise ValueError("cannot fit on empty input")
    if y.shape != (len(X),):
        raise ValueError(f"{len(X)} rows but {y.shape[0] if y.ndim else 0} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    ncat = schema.category_counts()
    if ncat.max(initial=0) > MAX_CATEGORIES:
        raise ValueError(f"categorical cardinality above {MAX_CATEGORIES} is unsupported")
    if row_ids is not None:
        order = np.argsort(np.asarray(row_ids), kind="stable")
        X, y = X[order], y[order]
    X = np.ascontiguousarray(X)
    y = np.ascontiguousarray(y, dtype=np.int64)
    mtry = params.features_per_split(X.shape[1])
    R, uniq, uoff = _rank_encode(X, ncat)

    parts = {name: [] for name in _ARRAYS}
    roots = np.zeros(params.n_trees, np.int64)
    offset = 0
    for t in range(params.n_trees):
        arrays = _grow_tree(R, uniq, uoff, y, ncat, mtry, params.min_samples_leaf, params.bootstrap,
                            sub_seed(params.seed, t))
        roots[t] = offset
        for name, a in zip(_ARRAYS, arrays):
            if name in ("left", "right"):
                a = np.where(a >= 0, a + offset, -1)
            parts[name].append(a)
        offset += len(arrays[0])
    flat = {name: np.concatenate(v) for name, v in parts.items()}
    return ForestModel(params=params, schema=schema, roots=roots, **flat)


def vote_counts(model: ForestModel, X) -> np.ndarray:
    X = _check_X(np.atleast_2d(X), model.schema)
    return _votes(X, model.roots, model.feature, model.threshold, model.catmask, model.left,
                  model.right, model.count0, model.count1, model.schema.category_counts())


def predict_proba(model: ForestModel, X):
    """Fraction of trees voting class 1; a 1-D row gives a float."""
    single = np.ndim(X) == 1
    p = vote_counts(model, X) / model.n_trees
    return float(p[0]) if single else p


def predict(model: ForestModel, X):
    p = predict_proba(model, X)
    return int(p >= 0.5) if np.ndim(p) == 0 else (p >= 0.5).astype(np.int8)


# --- persistence --------------------------------------------------------------

def save_model(model: ForestModel, path: str | Path) -> None:
    meta = {
        "format_version": FORMAT_VERSION,
        "params": asdict(model.params),
        "schema": [[f.name, f.kind, f.cardinality] for f in model.schema.features],
    }
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), roots=model.roots,
                 **{name: getattr(model, name) for name in _ARRAYS})


def load_model(path: str | Path) -> ForestModel:
    from .dataset import Feature

    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format {meta.get('format_version')!r}")
        schema = FeatureSchema(tuple(Feature(*f) for f in meta["schema"]))
        return ForestModel(params=ForestParams(**meta["params"]), schema=schema,
                           roots=z["roots"], **{name: z[name] for name in _ARRAYS})
