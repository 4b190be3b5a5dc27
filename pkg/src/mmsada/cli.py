"""Command-line harness: single runs, domain-pair suites and sweeps.

Exit codes: 0 success, 1 configuration error, 2 runtime failure or
divergence, 3 a suite finished with some failed runs.
"""
from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import io
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import evaluator as ev
from . import trainer as tr
from ._io import atomic_write_text
from .nets import save_checkpoint
from .synthdata import ConfigError, DataError, dump_domain, generate_domains

log = logging.getLogger("mmsada")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3
LAST_K = 9
LONG_COLUMNS = ("method", "lambda_d", "policy", "source_domain", "target_domain", "pair", "seed",
                "target_top1", "source_top1", "rgblike_top1", "flowlike_top1")
SUMMARY_FIELDS = ("target_top1", "source_top1", "rgblike_top1", "flowlike_top1")


# ---------------------------------------------------------------- single runs

def scaled(rc: cfgmod.RunConfig, seed: int | None = None, steps_scale: float | None = None,
           **overrides) -> cfgmod.RunConfig:
    """A copy of ``rc`` with CLI overrides applied; ``rc`` itself is untouched."""
    exp = dataclasses.replace(rc.experiment, **overrides)
    if seed is not None:
        exp.seed = seed
    if steps_scale is not None:
        if steps_scale <= 0:
            raise ConfigError("--steps-scale must be positive")
        exp.stage1_steps = int(round(exp.stage1_steps * steps_scale))
        exp.stage2_steps = int(round(exp.stage2_steps * steps_scale))
    exp.validate()
    return cfgmod.RunConfig(exp, copy.deepcopy(rc.generator), copy.deepcopy(rc.domains), rc.prototype_seed)


def build_datasets(rc: cfgmod.RunConfig):
    return generate_domains(copy.deepcopy(rc.domains), rc.prototype_seed, rc.generator)


def run_experiment(rc: cfgmod.RunConfig, out_dir, datasets=None) -> list:
    """generate -> train -> evaluate -> export into ``out_dir``.

    Writes ``metrics.csv``, ``model.ckpt`` (the weights used for target
    evaluation, i.e. with adapted batch-norm statistics where the method
    adapts them), ``embeddings.tsv`` and ``config.txt`` (the resolved
    configuration).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    datasets = datasets if datasets is not None else build_datasets(rc)
    exp = rc.experiment
    result = tr.train(exp, datasets)
    target = datasets[exp.target_domain]
    bundle = result.eval_bundle(target.train, exp.n_test_windows)
    ev.write_metrics_csv(result.records, out / "metrics.csv")
    save_checkpoint(bundle, out / "model.ckpt")
    ev.export_embeddings(bundle, [datasets[exp.source_domain], target], out / "embeddings.tsv")
    atomic_write_text(out / "config.txt", cfgmod.format_run_config(rc))
    return result.records


def run_single(config_path, out_dir, seed=None, steps_scale=None) -> int:
    try:
        rc = scaled(cfgmod.load_run_config(config_path), seed, steps_scale)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        records = run_experiment(rc, out_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (tr.DivergenceError, DataError, FloatingPointError, ArithmeticError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    k = min(LAST_K, len(records))
    if k:
        print(f"{rc.experiment.method} {rc.experiment.source_domain}>{rc.experiment.target_domain} "
              f"target_top1={ev.average_last_k(records, 'target_top1', k):.4f} (last {k} epochs)")
    return EXIT_OK


# ---------------------------------------------------------------- suites

def plan_suite(spec: cfgmod.SuiteSpec, seeds=None, steps_scale=None) -> list[tuple[str, cfgmod.RunConfig]]:
    """Every (sweep value, method, pair, seed) run, tagged with a sortable directory name."""
    values = spec.sweep_values if spec.sweep != "none" else [None]
    jobs = []
    for value in values:
        for method in spec.methods:
            for src, tgt in spec.pairs:
                for seed in (seeds if seeds is not None else spec.seeds):
                    kw = dict(method=method, source_domain=src, target_domain=tgt)
                    if value is not None:
                        kw[spec.sweep] = value
                    rc = scaled(spec.base, seed, steps_scale, **kw)
                    tag = f"{len(jobs):04d}_{method}_{src}-{tgt}_s{seed}"
                    if value is not None:
                        tag += f"_{spec.sweep}-{value}"
                    jobs.append((tag, rc))
    return jobs


_DATA_CACHE: dict = {}


def _suite_child(args):
    tag, rc, out_dir = args
    try:
        key = cfgmod.format_run_config(dataclasses.replace(rc, experiment=tr.ExperimentConfig()))
        if key not in _DATA_CACHE:
            _DATA_CACHE.clear()
            _DATA_CACHE[key] = build_datasets(rc)
        run_experiment(rc, out_dir, _DATA_CACHE[key])
        return tag, None
    except Exception as exc:  # a child failure must not stop the suite
        return tag, f"{type(exc).__name__}: {exc}"


def aggregate(metric_paths) -> tuple[list[dict], list[dict]]:
    """Long rows (one per run, then one mean row per group) and the wide table.

    Runs are grouped by (method, lambda_d, policy).  Each run contributes
    the mean over its last 9 epochs; per pair the seeds are averaged first,
    and the group mean is the plain mean over pairs.
    """
    long_rows, groups = [], {}
    for path in metric_paths:
        with open(path, newline="") as fh:
            recs = [_RowRecord(r) for r in csv.DictReader(fh)]
        if not recs:
            continue
        first = recs[0].raw
        k = min(LAST_K, len(recs))
        row = {
            "method": first["method"], "lambda_d": first["lambda_d"], "policy": first["policy"],
            "source_domain": first["source_domain"], "target_domain": first["target_domain"],
            "pair": f"{first['source_domain']}>{first['target_domain']}", "seed": first["seed"],
        }
        for f in SUMMARY_FIELDS:
            row[f] = ev.average_last_k(recs, f, k)
        long_rows.append(row)
        g = groups.setdefault((row["method"], row["lambda_d"], row["policy"]), {})
        g.setdefault(row["pair"], []).append(row)

    table, mean_rows = [], []
    for (method, lam, pol), pairs in groups.items():
        mean_row = {"method": method, "lambda_d": lam, "policy": pol, "source_domain": "",
                    "target_domain": "", "pair": "mean", "seed": "mean"}
        wide = {"method": method, "lambda_d": lam, "policy": pol}
        for f in SUMMARY_FIELDS:
            per_pair = {p: float(np.mean([r[f] for r in rows])) for p, rows in pairs.items()}
            mean_row[f] = float(np.mean(list(per_pair.values())))
            if f == "target_top1":
                wide.update(per_pair)
                wide["mean"] = mean_row[f]
        mean_rows.append(mean_row)
        table.append(wide)
    return long_rows + mean_rows, table


class _RowRecord:
    def __init__(self, raw: dict):
        self.raw = raw

    def get(self, name):
        return float(self.raw[name])


def _csv_text(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c, "")) for c in columns])
    return buf.getvalue()


def _cell(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_tables(out_dir, metric_paths) -> tuple[list[dict], list[dict]]:
    out = Path(out_dir)
    long_rows, table = aggregate(metric_paths)
    atomic_write_text(out / "suite_long.csv", _csv_text(long_rows, LONG_COLUMNS))
    pair_cols = []
    for row in table:
        for c in row:
            if c not in ("method", "lambda_d", "policy", "mean") and c not in pair_cols:
                pair_cols.append(c)
    cols = ["method", "lambda_d", "policy", *pair_cols, "mean"]
    atomic_write_text(out / "suite_table.csv", _csv_text(table, cols))
    return long_rows, table


def collect_metric_paths(out_dir) -> list[Path]:
    return sorted(Path(out_dir, "runs").glob("*/metrics.csv"))


def run_suite(suite_path, out_dir, seed=None, steps_scale=None, jobs: int = 1) -> int:
    try:
        spec = cfgmod.load_suite(suite_path)
        planned = plan_suite(spec, [seed] if seed is not None else None, steps_scale)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(out_dir)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    work = [(tag, rc, out / "runs" / tag) for tag, rc in planned]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_suite_child, work))
    else:
        results = [_suite_child(w) for w in work]
    failures = [(tag, err) for tag, err in results if err is not None]
    for tag, err in results:
        print(f"{'FAIL' if err else 'ok  '} {tag}")
    ok_paths = [out / "runs" / tag / "metrics.csv" for tag, err in results if err is None]
    write_tables(out, ok_paths)
    summary = [f"{len(results) - len(failures)} of {len(results)} runs succeeded"]
    summary += [f"{tag}: {err}" for tag, err in failures]
    atomic_write_text(out / "summary.txt", "\n".join(summary) + "\n")
    print(summary[0])
    if failures:
        for line in summary[1:]:
            print(line, file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mmsada", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", default="out", help="output directory (default: ./out)")
        p.add_argument("--seed", type=int, default=None, help="override the run seed(s)")
        p.add_argument("--steps-scale", type=float, default=None,
                       help="multiply both stage step counts, e.g. 0.1 for a quick run")

    p = sub.add_parser("run", help="train and evaluate one configuration")
    p.add_argument("config")
    common(p)
    p = sub.add_parser("suite", help="run every method/pair/seed of a suite file")
    p.add_argument("spec")
    common(p)
    p.add_argument("--jobs", type=int, default=1, help="concurrent runs (default 1)")
    p = sub.add_parser("aggregate", help="rebuild suite tables from an existing suite directory")
    p.add_argument("dir")
    p = sub.add_parser("data", help="write the synthetic domains of a config as data files")
    p.add_argument("config")
    p.add_argument("--out", default="data")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        return run_single(args.config, args.out, args.seed, args.steps_scale)
    if args.command == "suite":
        if args.jobs < 1:
            print("config error: --jobs must be at least 1", file=sys.stderr)
            return EXIT_CONFIG
        return run_suite(args.spec, args.out, args.seed, args.steps_scale, args.jobs)
    if args.command == "aggregate":
        paths = collect_metric_paths(args.dir)
        if not paths:
            print(f"no runs under {args.dir}/runs", file=sys.stderr)
            return EXIT_CONFIG
        write_tables(args.dir, paths)
        return EXIT_OK
    try:
        rc = cfgmod.load_run_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    os.makedirs(args.out, exist_ok=True)
    for dom_id, ds in build_datasets(rc).items():
        dump_domain(ds, Path(args.out) / f"{dom_id}.txt")
        print(Path(args.out) / f"{dom_id}.txt")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
