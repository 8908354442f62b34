"""Acceptance criteria, one test per criterion.

Each test prints a single ``PASS <criterion>: ...`` or ``FAIL <criterion>: ...``
line (also repeated in the terminal summary) and then asserts the criterion.
Tolerances and runtime budgets are pinned below.
"""
import datetime as dt
import os
import time

import numpy as np
import pytest
from scipy.stats import binomtest

from dayshift import clustering as cl
from dayshift import fraudeval as fe
from dayshift import shiftmatrix as sm
from dayshift import synthgen as sg
from dayshift.forest import ForestParams, fit, predict, predict_proba
from dayshift.metrics import ConfusionMatrix, confusion, mcc, pr_auc, roc_auc

from conftest import ACCEPTANCE_LINES, shifted_pair_table
from test_forest import ONE_D, mixed_data, separable
from test_metrics import ap_by_ranks, mcc_formula, roc_by_pairs

pytestmark = pytest.mark.slow

WORKERS = min(8, os.cpu_count() or 1)
DESK = dict(n_train_per_day=2000, n_test_per_day=500)


def verdict(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


# --- metrics and forest -------------------------------------------------------------


def test_metrics_oracle_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_roc = worst_pr = worst_mcc = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        rng.shuffle(labels)
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))  # ties included
        worst_roc = max(worst_roc, abs(roc_auc((scores, labels)) - roc_by_pairs(scores, labels)))
        worst_pr = max(worst_pr, abs(pr_auc((scores, labels)) - ap_by_ranks(scores, labels)))
        pred = rng.integers(0, 2, n)
        cm = confusion(pred, labels)
        worst_mcc = max(worst_mcc, abs(mcc(cm) - mcc_formula(cm.tp, cm.fp, cm.fn, cm.tn)))
    degenerate = [(5, 0, 0, 0), (0, 0, 0, 5), (3, 4, 0, 0), (0, 0, 3, 4)]
    for tp, fp, fn, tn in degenerate:
        worst_mcc = max(worst_mcc, abs(mcc(ConfusionMatrix(tp, fp, fn, tn)) - 0.0))
    elapsed = time.perf_counter() - t0
    ok = worst_roc <= 1e-9 and worst_pr <= 1e-9 and worst_mcc <= 1e-12 and elapsed < 5
    verdict("metrics-oracle", ok, f"max err roc={worst_roc:.1e} pr={worst_pr:.1e} "
            f"mcc={worst_mcc:.1e}, {elapsed:.1f}s (< 5s)")


def test_forest_sanity():
    t0 = time.perf_counter()
    X, y = separable(500, np.random.default_rng(1))
    Xt, yt = separable(500, np.random.default_rng(2))
    acc = float(np.mean(predict(fit(X, y, ForestParams(seed=3), ONE_D), Xt) == yt))
    Xm, ym, schema = mixed_data(2000, np.random.default_rng(5))
    probe = mixed_data(1000, np.random.default_rng(6))[0]
    p = ForestParams(seed=7)
    m1, m2 = fit(Xm, ym, p, schema), fit(Xm, ym, p, schema)
    same = np.array_equal(predict_proba(m1, probe), predict_proba(m2, probe))
    min_leaf = int(m1.leaf_sizes().min())
    elapsed = time.perf_counter() - t0
    ok = acc >= 0.99 and same and min_leaf >= p.min_samples_leaf and elapsed < 30
    verdict("forest-sanity", ok, f"accuracy={acc:.4f} (>= 0.99), deterministic={same}, "
            f"smallest leaf={min_leaf} (>= {p.min_samples_leaf}), {elapsed:.1f}s (< 30s)")


# --- pairwise shift ------------------------------------------------------------------


def test_null_calibration():
    t0 = time.perf_counter()
    table = sg.generate(sg.belgian_calendar_2015(), sg.GenParams(separation=0.0, seed=11))
    rng = np.random.default_rng(0)
    pairs = set()
    while len(pairs) < 10:
        i, j = sorted(rng.choice(table.n_days, 2, replace=False).tolist())
        pairs.add((i, j))
    proto = sm.PairProtocol(**DESK, seed=3)
    vals = np.array([sm.pair_shift(table, i, j, proto) for i, j in sorted(pairs)])
    elapsed = time.perf_counter() - t0
    mean_abs, max_abs = float(np.abs(vals).mean()), float(np.abs(vals).max())
    ok = mean_abs <= 0.05 and max_abs <= 0.15 and elapsed < 120
    verdict("null-calibration", ok, f"mean |MCC|={mean_abs:.4f} (<= 0.05), "
            f"max |MCC|={max_abs:.4f} (<= 0.15), {elapsed:.1f}s (< 120s)")


def test_shift_detection():
    t0 = time.perf_counter()
    table = shifted_pair_table(2600, seed=3)
    v = sm.pair_shift(table, 0, 1, sm.PairProtocol(**DESK, seed=2))
    elapsed = time.perf_counter() - t0
    verdict("shift-detection", v >= 0.8 and elapsed < 30,
            f"3-sigma amount shift MCC={v:.4f} (>= 0.8), {elapsed:.1f}s (< 30s)")


def test_matrix_structure():
    t0 = time.perf_counter()
    cal = sg.CalendarModel(dt.date(2015, 3, 1), 30)
    table = sg.generate(cal, sg.GenParams(separation=1.0, seed=5))
    proto = sm.PairProtocol(**DESK, seed=1)
    m1 = sm.build_matrix(table, proto, workers=1)
    t1 = time.perf_counter()
    m8 = sm.build_matrix(table, proto, workers=8)
    t8 = time.perf_counter()
    n_pairs = len(sm.all_pairs(table.n_days))
    symmetric = all(np.array_equal(m.dist, m.dist.T) and np.array_equal(m.raw_mcc, m.raw_mcc.T)
                    for m in (m1, m8))
    zero_diag = all(np.all(np.diag(m.dist) == 0.0) for m in (m1, m8))
    identical = (m1.dist.tobytes() == m8.dist.tobytes()
                 and m1.raw_mcc.tobytes() == m8.raw_mcc.tobytes())
    ok = n_pairs == 435 and symmetric and zero_diag and identical and (t1 - t0) < 600
    verdict("matrix-structure", ok,
            f"{n_pairs} pairs, symmetric={symmetric}, zero diagonal={zero_diag}, "
            f"1 vs 8 workers bit-identical={identical}, {t1 - t0:.0f}s 1-worker (< 600s), "
            f"{t8 - t1:.0f}s 8-worker")


# --- clustering and uplift ----------------------------------------------------------


@pytest.fixture(scope="module")
def season_matrix():
    """92-day delta=1 dataset and its desk-scale shift matrix (the slow part)."""
    cal = sg.belgian_calendar_2015()
    table = sg.generate(cal, sg.GenParams(separation=1.0, seed=42))
    t0 = time.perf_counter()
    m = sm.build_matrix(table, sm.PairProtocol(**DESK, seed=42), workers=WORKERS)
    return cal, m, time.perf_counter() - t0


def largest_drop_k(curve):
    ks = [k for k, _ in curve]
    h = np.array([v for _, v in curve])
    return ks[int(np.argmax(h[:-1] - h[1:]))]


def test_clustering_recovery(season_matrix):
    cal, m, build_s = season_matrix
    d = cl.agglomerate(m, "average")
    a = cl.cut(d, 4, m.day_dates)
    truth = [int(t) for t in cal.day_types()]
    ari = cl.compare_assignments(a.labels, truth)
    monotone = bool(np.all(np.diff(d.heights) >= 0))
    drop_k = largest_drop_k(cl.intercluster_curve(m, d, 10))
    ok = ari >= 0.9 and monotone and drop_k <= 4 and build_s < 45 * 60
    verdict("clustering-recovery", ok,
            f"ARI={ari:.4f} (>= 0.9), monotone heights={monotone}, largest curve drop "
            f"after k={drop_k} (<= 4), matrix {build_s / 60:.1f} min on {WORKERS} worker(s) "
            "(< 45 min)")


def _uplift(seed, gen, assignment):
    table = sg.generate(sg.belgian_calendar_2015(), gen)
    rep = fe.run_protocol(table, assignment, fe.make_folds(table.n_days),
                          ForestParams(seed=seed), workers=WORKERS)
    avg = rep.averages()
    return avg["pr_auc_with"] - avg["pr_auc_without"], rep


def test_feature_injection_uplift(season_matrix):
    cal, m, _ = season_matrix
    # the day-cluster feature comes from the recovered clustering of the shift matrix
    assignment = cl.cut(cl.agglomerate(m, "average"), 4, m.day_dates)
    t0 = time.perf_counter()
    shifted = [_uplift(s, sg.GenParams(separation=1.0, seed=s), assignment)[0]
               for s in range(1, 6)]
    uniform = {t: 1.0 for t in sg.DayType}
    null = [_uplift(s, sg.GenParams(separation=0.0, seed=s, fraud_rate_multiplier=uniform),
                    assignment)[0] for s in range(101, 111)]
    elapsed = time.perf_counter() - t0
    wins = sum(x > 0 for x in shifted)
    positives = sum(x > 0 for x in null)
    p = binomtest(positives, len(null), 0.5).pvalue
    ok = wins >= 4 and p > 0.05 and elapsed < 15 * 60
    verdict("injection-uplift", ok,
            f"delta=1: PR-AUC gain > 0 in {wins}/5 seeds (>= 4), mean gain "
            f"{np.mean(shifted):+.4f}; delta=0 uniform: {positives}/10 positive, sign-test "
            f"p={p:.3f} (> 0.05); {elapsed / 60:.1f} min (< 15 min)")


# --- folds and report ---------------------------------------------------------------


def test_fold_layout_and_gap_audit():
    cal = sg.belgian_calendar_2015()
    table = sg.generate(cal, sg.GenParams(tx_per_day=200, seed=3))
    folds = fe.make_folds(table.n_days)
    labels = [f"{cal.dates[f.test_days[0]]:%d/%m}" for f in folds]
    expect = ["16/03", "23/03", "30/03", "06/04", "13/04"]
    gap_ok = True
    for f in folds:
        train, gap, test = (set(table.row_ids[r]) for r in fe.fold_rows(table, f))
        last_train = max(cal.dates[table.day_index[i]] for i in train)
        first_test = min(cal.dates[table.day_index[i]] for i in test)
        gap_dates = {cal.dates[table.day_index[i]] for i in gap}
        gap_ok &= (not train & test and not train & gap and not gap & test
                   and (first_test - last_train).days == 8 and len(gap_dates) == 7
                   and all(last_train < g < first_test for g in gap_dates))
    ok = labels == expect and gap_ok
    verdict("fold-layout", ok, f"test windows start {', '.join(labels)}; 7-day gap audited "
            f"by row id={gap_ok}")


def test_report_layout():
    cal = sg.belgian_calendar_2015()
    table = sg.generate(cal, sg.GenParams(separation=1.0, tx_per_day=400, seed=8))
    assignment = cl.ClusterAssignment(4, tuple(int(t) for t in cal.day_types()), cal.dates)
    rep = fe.run_protocol(table, assignment, fe.make_folds(92), ForestParams(n_trees=20, seed=1))
    lines = fe.format_report(rep).splitlines()
    fold_rows = [x.split("|")[0].strip() for x in lines if x[:2].isdigit()]
    avg_rows = [x for x in lines if x.startswith("average")]
    expect = ["16/03-22/03", "23/03-29/03", "30/03-05/04", "06/04-12/04", "13/04-19/04"]
    ok = fold_rows == expect and len(avg_rows) == 1 and len(avg_rows[0].replace("|", " ").split()) == 5
    verdict("report-layout", ok, f"{len(fold_rows)} fold rows {fold_rows} + "
            f"{len(avg_rows)} average row")
