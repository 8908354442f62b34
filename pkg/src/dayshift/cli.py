"""Command-line pipeline: generate -> matrix -> cluster -> evaluate (+ verify).

Each stage reads the previous stage's files from ``--out`` and records every
file it writes in ``manifest.json`` together with a content hash.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, clustering, fraudeval, shiftmatrix, synthgen
from .dataset import DataError, TransactionTable, load_csv, write_csv, write_schema
from .forest import ForestParams

log = logging.getLogger("dayshift")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INFEASIBLE = 0, 1, 2, 3

DEFAULTS = {
    "out": "dayshift_out",
    "seed": 42,
    "workers": 1,
    "calendar": "belgian2015",
    "delta": 1.0,
    "tx_per_day": 3000,
    "fraud_base_rate": 0.01,
    "dataset": None,
    "schema": None,
    "train_per_day": 2000,
    "test_per_day": 500,
    "repeats": 1,
    "n_trees": 100,
    "max_features": "sqrt",
    "min_samples_leaf": 10,
    "k": 4,
    "k_max": 10,
    "linkage": "average",
    "folds": 5,
    "first_test_start": 15,
}

DATASET, SCHEMA, DAYTYPES = "dataset.csv", "dataset.schema", "dataset.daytypes.csv"
MATRIX, HEATMAP, GRAYMAP = "matrix.csv", "matrix_heatmap.ppm", "matrix_gray.pgm"
DENDRO, CLUSTERS, CURVE, GRID = "dendrogram.nwk", "clusters.csv", "curve.csv", "clusters_grid.txt"
REPORT_CSV, REPORT_TXT = "report.csv", "report.txt"
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- config --------------------------------------------------------------------

def read_config(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment, dashes in keys become underscores."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    cfg = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, _, val = line.partition("=")
        cfg[key.strip().replace("-", "_")] = val.strip()
    return cfg


class Settings:
    """Resolved options with CLI > config file > defaults precedence."""

    def __init__(self, args: argparse.Namespace, cfg: dict[str, str]):
        self.args, self.cfg = args, cfg

    def get(self, key, cast=str):
        v = getattr(self.args, key, None)
        if v is not None:
            return v
        if key in self.cfg:
            try:
                return cast(self.cfg[key])
            except ValueError:
                raise UsageError(f"config value {key} = {self.cfg[key]!r} is invalid") from None
        return DEFAULTS[key]

    @property
    def out(self) -> Path:
        return Path(self.get("out"))

    @property
    def seed(self) -> int:
        return self.get("seed", int)

    def forest(self) -> ForestParams:
        mf = self.get("max_features")
        return ForestParams(
            n_trees=self.get("n_trees", int),
            max_features=mf if mf == "sqrt" else int(mf),
            min_samples_leaf=self.get("min_samples_leaf", int),
            seed=self.seed,
        )


def config_hash(stage_cfg: dict) -> str:
    blob = json.dumps(stage_cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def stamp(stage_cfg: dict, seed: int) -> str:
    return f"dayshift {__version__} config={config_hash(stage_cfg)} seed={seed}"


# --- manifest --------------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_manifest(out: Path) -> dict:
    p = out / MANIFEST
    if p.is_file():
        return json.loads(p.read_text(encoding="utf-8"))
    return {"tool_version": __version__, "artifacts": {}}


def _record(out: Path, stage: str, stage_cfg: dict, seed: int, files) -> None:
    man = _load_manifest(out)
    man["tool_version"] = __version__
    for name in files:
        man["artifacts"][name] = {
            "stage": stage,
            "sha256": _sha256(out / name),
            "config_hash": config_hash(stage_cfg),
            "seed": seed,
        }
    man["artifacts"] = dict(sorted(man["artifacts"].items()))
    (out / MANIFEST).write_text(json.dumps(man, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _prepare_out(out: Path) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise UsageError(f"output directory {out} is not writable: {e}") from None


# --- heatmaps ------------------------------------------------------------------------

GREEN = np.array([0, 170, 0], np.float64)
RED = np.array([210, 0, 0], np.float64)


def percentile_ranks(dist: np.ndarray) -> np.ndarray:
    """Percentile rank of each off-diagonal cell among all day pairs.

    Pairs are ordered by value, ties by flat upper-triangle index; rank r of
    P pairs maps to (r + 0.5) / P. The diagonal is NaN.
    """
    n = len(dist)
    iu = np.triu_indices(n, 1)
    vals = dist[iu]
    order = np.lexsort((np.arange(len(vals)), vals))
    pct = np.empty(len(vals))
    pct[order] = (np.arange(len(vals)) + 0.5) / max(len(vals), 1)
    out = np.full((n, n), np.nan)
    out[iu] = pct
    out[(iu[1], iu[0])] = pct
    return out


def heatmap_pixels(dist: np.ndarray, cell: int = 6) -> np.ndarray:
    pct = percentile_ranks(dist)
    rgb = np.empty(pct.shape + (3,))
    diag = np.isnan(pct)
    p = np.where(diag, 0.0, pct)[..., None]
    rgb[:] = (1 - p) * GREEN + p * RED
    rgb[diag] = 255
    img = np.round(rgb).astype(np.uint8)
    return np.repeat(np.repeat(img, cell, axis=0), cell, axis=1)


def write_ppm(path: Path, img: np.ndarray, comment: str) -> None:
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n# {comment}\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(img).tobytes())


def write_pgm(path: Path, dist: np.ndarray, comment: str, cell: int = 6) -> None:
    g = np.round(255 * (1 - np.clip(dist, 0, 1))).astype(np.uint8)
    np.fill_diagonal(g, 255)
    g = np.repeat(np.repeat(g, cell, axis=0), cell, axis=1)
    h, w = g.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n# {comment}\n{w} {h}\n255\n".encode())
        fh.write(g.tobytes())


# --- stages --------------------------------------------------------------------

def _load_dataset(s: Settings) -> TransactionTable:
    data = Path(s.get("dataset") or s.out / DATASET)
    schema = Path(s.get("schema") or data.with_name(
        data.name[:-4] + ".schema" if data.name.endswith(".csv") else data.name + ".schema"))
    if not data.is_file():
        raise DataError(f"dataset not found: {data} (run `dayshift generate` first)")
    return load_csv(data, schema)


def cmd_generate(s: Settings) -> int:
    if s.get("calendar") != "belgian2015":
        raise UsageError(f"unknown calendar {s.get('calendar')!r}")
    out = s.out
    _prepare_out(out)
    gen_cfg = {k: v for k, v in s.cfg.items()
               if k in ("delta", "separation", "tx_per_day", "fraud_base_rate")
               or k.startswith("fraud_multiplier.")}
    gen_cfg.update({"delta": s.get("delta", float), "tx_per_day": s.get("tx_per_day", int),
                    "fraud_base_rate": s.get("fraud_base_rate", float), "seed": s.seed})
    gen_cfg.pop("separation", None)
    try:
        params = synthgen.GenParams.from_mapping({k: str(v) for k, v in gen_cfg.items()})
    except (ValueError, KeyError) as e:
        raise UsageError(str(e)) from None
    cal = synthgen.belgian_calendar_2015()
    table = synthgen.generate(cal, params)
    stage_cfg = {"stage": "generate", "calendar": s.get("calendar"), **gen_cfg}
    header = [stamp(stage_cfg, s.seed)]
    write_csv(table, out / DATASET, header)
    write_schema(table.schema, out / SCHEMA, header)
    synthgen.write_daytypes(cal, out / DAYTYPES, header)
    _record(out, "generate", stage_cfg, s.seed, [DATASET, SCHEMA, DAYTYPES])
    print(f"wrote {table.n_rows} transactions over {table.n_days} days to {out / DATASET}")
    return EXIT_OK


def cmd_matrix(s: Settings) -> int:
    out = s.out
    _prepare_out(out)
    table = _load_dataset(s)
    proto = shiftmatrix.PairProtocol(
        n_train_per_day=s.get("train_per_day", int),
        n_test_per_day=s.get("test_per_day", int),
        forest=s.forest(),
        seed=s.seed,
        repeats=s.get("repeats", int),
    )
    meta = {"tool_version": __version__, "dataset_hash": table.fingerprint(),
            **proto.describe()}
    stage_cfg = {"stage": "matrix", **meta}
    _, meta_path = shiftmatrix.companion_paths(out / MATRIX)
    m = None
    if meta_path.is_file() and (out / MATRIX).is_file():
        old = shiftmatrix.read_meta(meta_path)
        if old.get("dataset_hash") != meta["dataset_hash"] and not s.args.force:
            raise DataError(f"cached matrix in {out} was built from a different dataset; "
                            "pass --force to rebuild")
        if old == meta:
            log.info("reusing cached matrix %s", out / MATRIX)
            m = shiftmatrix.read_matrix(out / MATRIX)
    if m is None:
        n_pairs = table.n_days * (table.n_days - 1) // 2
        log.info("computing %d day pairs with %d worker(s)", n_pairs, s.get("workers", int))

        def progress(done, total):
            if done % 100 == 0 or done == total:
                log.info("pairs %d/%d", done, total)

        m = shiftmatrix.build_matrix(table, proto, workers=s.get("workers", int),
                                     progress=progress)
    header = [stamp(stage_cfg, s.seed)]
    shiftmatrix.write_matrix(m, out / MATRIX, meta, header)
    write_ppm(out / HEATMAP, heatmap_pixels(m.dist), header[0])
    write_pgm(out / GRAYMAP, m.dist, header[0])
    raw_path, _ = shiftmatrix.companion_paths(out / MATRIX)
    _record(out, "matrix", stage_cfg, s.seed,
            [MATRIX, raw_path.name, meta_path.name, HEATMAP, GRAYMAP])
    print(f"wrote {m.n_days}x{m.n_days} shift matrix to {out / MATRIX}")
    return EXIT_OK


def _read_matrix(s: Settings):
    path = s.out / MATRIX
    if not path.is_file():
        raise DataError(f"matrix not found: {path} (run `dayshift matrix` first)")
    return shiftmatrix.read_matrix(path)


def cmd_cluster(s: Settings) -> int:
    out = s.out
    m = _read_matrix(s)
    k, linkage = s.get("k", int), s.get("linkage")
    k_max = min(s.get("k_max", int), m.n_days)
    if not 1 <= k <= m.n_days:
        raise UsageError(f"k={k} outside [1, {m.n_days}]")
    d = clustering.agglomerate(m, linkage)
    a = clustering.cut(d, k, m.day_dates)
    curve = clustering.intercluster_curve(m, d, k_max) if k_max >= 2 else []
    stage_cfg = {"stage": "cluster", "k": k, "k_max": k_max, "linkage": linkage,
                 "matrix_sha256": _sha256(out / MATRIX)}
    header = [stamp(stage_cfg, s.seed)]
    names = [x.isoformat() for x in m.day_dates]
    (out / DENDRO).write_text(f"[{header[0]}]\n" + clustering.to_newick(d, names) + "\n",
                              encoding="utf-8")
    clustering.write_assignment(a, out / CLUSTERS, header)
    clustering.write_curve(curve, out / CURVE, header)
    (out / GRID).write_text(f"# {header[0]}\n" + clustering.weekly_grid(a), encoding="utf-8")
    _record(out, "cluster", stage_cfg, s.seed, [DENDRO, CLUSTERS, CURVE, GRID])
    print(clustering.weekly_grid(a), end="")
    return EXIT_OK


def cmd_evaluate(s: Settings) -> int:
    out = s.out
    table = _load_dataset(s)
    no_leak = bool(s.args.no_leak)
    folds = fraudeval.make_folds(table.n_days, s.get("folds", int), s.get("first_test_start", int))
    params = s.forest()
    stage_cfg = {"stage": "evaluate", "folds": len(folds),
                 "first_test_start": s.get("first_test_start", int),
                 "no_leak": no_leak, "dataset_hash": table.fingerprint(),
                 "forest": [params.n_trees, str(params.max_features), params.min_samples_leaf]}
    if no_leak:
        m = _read_matrix(s)
        k = s.get("k", int)
        assignment = [fraudeval.assign_without_leak(m, f.test_days[0], k) for f in folds]
        mode = "no-leak"
        stage_cfg.update(k=k, matrix_sha256=_sha256(out / MATRIX))
    else:
        if not (out / CLUSTERS).is_file():
            raise DataError(f"assignment not found: {out / CLUSTERS} (run `dayshift cluster`)")
        assignment = clustering.read_assignment(out / CLUSTERS)
        mode = "full-period"
        stage_cfg.update(clusters_sha256=_sha256(out / CLUSTERS))
    report = fraudeval.run_protocol(table, assignment, folds, params,
                                    workers=s.get("workers", int), mode=mode)
    if mode == "full-period":
        report = fraudeval.EvalReport(report.folds, mode, (
            "note: clusters were computed over the whole period, including test days",))
    header = [stamp(stage_cfg, s.seed)]
    fraudeval.write_report_csv(report, out / REPORT_CSV, header)
    text = fraudeval.format_report(report)
    (out / REPORT_TXT).write_text(f"# {header[0]}\n" + text, encoding="utf-8")
    _record(out, "evaluate", stage_cfg, s.seed, [REPORT_CSV, REPORT_TXT])
    print(text, end="")
    return EXIT_OK


def _embedded_stamp(path: Path) -> str | None:
    with open(path, "rb") as fh:
        head = fh.read(512)
    for line in head.split(b"\n")[:3]:
        line = line.strip(b"#[] ")
        if line.startswith(b"dayshift "):
            return line.decode()
    return None


def cmd_verify(s: Settings) -> int:
    out = s.out
    man_path = out / MANIFEST
    if not man_path.is_file():
        raise DataError(f"no manifest in {out}")
    man = json.loads(man_path.read_text(encoding="utf-8"))
    problems = []
    for name, info in man.get("artifacts", {}).items():
        p = out / name
        if not p.is_file():
            problems.append(f"{name}: missing")
            continue
        if _sha256(p) != info["sha256"]:
            problems.append(f"{name}: content hash mismatch")
        emb = _embedded_stamp(p)
        if emb is not None and f"config={info['config_hash']}" not in emb:
            problems.append(f"{name}: embedded config hash disagrees with manifest")
        if emb is not None and f"seed={info['seed']}" not in emb:
            problems.append(f"{name}: embedded seed disagrees with manifest")
    for msg in problems:
        print(f"FAIL {msg}")
    if problems:
        return EXIT_DATA
    print(f"verified {len(man.get('artifacts', {}))} artifacts in {out}")
    return EXIT_OK


# --- entry point ------------------------------------------------------------------

def build_parser() -> Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--out", help="artifact directory")
    common.add_argument("-v", "--verbose", action="store_true")

    forest_opts = argparse.ArgumentParser(add_help=False)
    forest_opts.add_argument("--n-trees", dest="n_trees", type=int)
    forest_opts.add_argument("--max-features", dest="max_features")
    forest_opts.add_argument("--min-samples-leaf", dest="min_samples_leaf", type=int)

    data_opts = argparse.ArgumentParser(add_help=False)
    data_opts.add_argument("--dataset", help="dataset CSV (default: <out>/dataset.csv)")
    data_opts.add_argument("--schema", help="schema file (default: next to the dataset)")

    p = Parser(prog="dayshift", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    g.add_argument("--calendar")
    g.add_argument("--delta", type=float, help="day-type separation (0 = no planted shift)")
    g.add_argument("--tx-per-day", dest="tx_per_day", type=int)
    g.add_argument("--fraud-base-rate", dest="fraud_base_rate", type=float)

    mx = sub.add_parser("matrix", parents=[common, forest_opts, data_opts],
                        help="build the day-pair shift matrix and heatmaps")
    mx.add_argument("--train-per-day", dest="train_per_day", type=int)
    mx.add_argument("--test-per-day", dest="test_per_day", type=int)
    mx.add_argument("--repeats", type=int)
    mx.add_argument("--force", action="store_true", help="rebuild over a stale cache")

    c = sub.add_parser("cluster", parents=[common], help="cluster days from the matrix")
    c.add_argument("--k", type=int)
    c.add_argument("--k-max", dest="k_max", type=int)
    c.add_argument("--linkage", choices=clustering.LINKAGES)

    e = sub.add_parser("evaluate", parents=[common, forest_opts, data_opts],
                       help="fraud detection with and without the day-cluster feature")
    e.add_argument("--folds", type=int)
    e.add_argument("--first-test-start", dest="first_test_start", type=int)
    e.add_argument("--k", type=int)
    e.add_argument("--no-leak", dest="no_leak", action="store_true",
                   help="cluster only pre-test days for each fold")

    sub.add_parser("verify", parents=[common], help="check artifact hashes against the manifest")
    return p


COMMANDS = {"generate": cmd_generate, "matrix": cmd_matrix, "cluster": cmd_cluster,
            "evaluate": cmd_evaluate, "verify": cmd_verify}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = read_config(args.config) if args.config else {}
        return COMMANDS[args.command](Settings(args, cfg))
    except UsageError as e:
        print(f"dayshift: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except fraudeval.InfeasibleError as e:
        print(f"dayshift: infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (DataError, ValueError) as e:
        print(f"dayshift: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
