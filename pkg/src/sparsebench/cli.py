"""``sparsebench`` command line.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O error,
4 every fit failed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .codebook import CodebookError, load_codebook, midus_codebook, save_codebook, synthetic_codebook
from .dataio import ConfigError, IngestError, SynthConfig, generate_synthetic, ingest, write_dataset_csv, write_ground_truth
from .harness import (
    MODELS, BenchmarkConfig, BenchmarkError, all_task_names, build_tasks, check_models, load_factor_ranking,
    load_report, rank_factors, run_benchmark, sparsity_records, write_factor_ranking, write_report,
)
from .preprocess import export_design_matrix, fit_transform
from .projection import ProjectionError, TsneConfig, build_atlas
from .stats import StatsError, sparsity_anova, ttest_matrix, write_stats

log = logging.getLogger("sparsebench")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_COMPUTE = 0, 2, 3, 4
USAGE_ERRORS = (ConfigError, CodebookError, IngestError, BenchmarkError, StatsError, ProjectionError, ValueError,
                KeyError, TypeError)


class UsageError(Exception):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digest_config(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def write_manifest(out: Path, command: str, config: dict, seed, inputs: list[Path], outputs: list[Path],
                   started: str) -> Path:
    path = out / "manifest.json"
    doc = {
        "command": command,
        "config": config,
        "config_digest": _digest_config(config),
        "seed": seed,
        "versions": {"sparsebench": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": sorted(str(Path(p).relative_to(out)) for p in outputs),
        "started": started,
        "finished": _now(),
    }
    path.write_text(json.dumps(doc, indent=2, default=str), encoding="utf-8")
    return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _read_json(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return doc


def _csv_list(text: str | None) -> list[str] | None:
    return [t.strip() for t in text.split(",") if t.strip()] if text else None


def default_jobs() -> int:
    env = os.environ.get("SPARSEBENCH_JOBS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"SPARSEBENCH_JOBS must be an integer, got {env!r}") from None
        if n < 1:
            raise UsageError("SPARSEBENCH_JOBS must be >= 1")
        return n
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def _jobs(args) -> int:
    if args.jobs is not None:
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        return args.jobs
    return default_jobs()


# -- commands ---------------------------------------------------------------------

def cmd_gen_synth(args) -> int:
    started = _now()
    doc = _read_json(args.config)
    cb_spec = doc.pop("codebook", {})
    if args.seed is not None:
        doc["seed"] = args.seed
    cfg = SynthConfig.from_dict(doc)
    if cb_spec == "midus":
        cb = midus_codebook()
    elif isinstance(cb_spec, dict):
        cb = synthetic_codebook(**cb_spec)
    else:
        raise UsageError("codebook must be \"midus\" or an object of synthetic_codebook arguments")
    ds = generate_synthetic(cb, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "codebook.json", out / "data.csv", out / "ground_truth.json"]
    save_codebook(cb, paths[0])
    write_dataset_csv(ds, paths[1])
    write_ground_truth(ds, paths[2])
    write_manifest(out, "gen-synth", {"synth": cfg.to_dict(), "codebook": cb_spec}, cfg.seed, [Path(args.config)],
                   paths, started)
    log.info("wrote %d participants x %d variables to %s", ds.n_rows, len(ds.variables), out)
    return EXIT_OK


def _load_inputs(args):
    cb = load_codebook(args.codebook)
    return cb, ingest(cb, args.data)


def cmd_ingest(args) -> int:
    started = _now()
    cb, ds = _load_inputs(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dm, _ = fit_transform(ds, ds)
    design, sidecar, summary = out / "design.csv", out / "design.json", out / "summary.json"
    export_design_matrix(dm, design, sidecar)
    rows = ds.sparsity_per_row()
    summary.write_text(json.dumps({
        "n_participants": ds.n_rows,
        "n_variables": len(ds.variables),
        "n_factors": cb.factor_count(),
        "kind_counts": dict(zip(("categorical", "numerical"), ds.codebook.kind_counts())),
        "sparsity": int(ds.sparsity()),
        "row_sparsity_mean": float(np.mean(rows)) if ds.n_rows else 0.0,
        "zero_variance": list(ds.zero_variance),
        "design_columns": dm.values.shape[1],
        "outcomes": sorted(ds.outcomes),
    }, indent=2), encoding="utf-8")
    write_manifest(out, "ingest", {}, None, [Path(args.codebook), Path(args.data)], [design, sidecar, summary],
                   started)
    return EXIT_OK


def _bench_config(args) -> BenchmarkConfig:
    doc = _read_json(args.config) if args.config else {}
    train = dict(doc.get("train", {}))
    for flag, key in (("max_epochs", "max_epochs"), ("patience", "early_stop_patience")):
        if getattr(args, flag, None) is not None:
            train[key] = getattr(args, flag)
    if train:
        doc["train"] = train
    for flag in ("ridge_lambda", "lasso_lambda", "rf_n_trees", "gb_n_trees"):
        if getattr(args, flag, None) is not None:
            doc[flag] = getattr(args, flag)
    return BenchmarkConfig.from_dict(doc)


def cmd_benchmark(args) -> int:
    started = _now()
    models = _csv_list(args.models) or list(MODELS)
    check_models(models)
    tasks = build_tasks(_csv_list(args.tasks))
    cfg = _bench_config(args)
    jobs = _jobs(args)
    cb, ds = _load_inputs(args)
    report = run_benchmark(ds, tasks, models, args.splits, args.train_frac, args.seed, cfg, jobs)
    out = Path(args.out)
    paths = write_report(report, out)
    total = len(report.split_digests)
    for key, msg in sorted(report.failures.items()):
        log.warning("fit failed %s: %s", "/".join(map(str, key)), msg)
    write_manifest(out, "benchmark", {"benchmark": cfg.to_dict(), "tasks": report.tasks, "models": models,
                                      "splits": args.splits, "train_frac": args.train_frac},
                   args.seed, [Path(args.codebook), Path(args.data)], paths, started)
    if total and len(report.failures) == total:
        log.error("all %d fits failed", total)
        return EXIT_COMPUTE
    return EXIT_OK


def cmd_rank_factors(args) -> int:
    started = _now()
    tasks = build_tasks(_csv_list(args.tasks))
    cfg = _bench_config(args)
    jobs = _jobs(args)
    cb, ds = _load_inputs(args)
    ranking = rank_factors(ds, tasks, args.seed, args.splits, args.train_frac, cfg, _csv_list(args.factors), jobs)
    out = Path(args.out)
    paths = write_factor_ranking(ranking, out, cb)
    write_manifest(out, "rank-factors", {"benchmark": cfg.to_dict(), "tasks": ranking.tasks, "splits": args.splits},
                   args.seed, [Path(args.codebook), Path(args.data)], paths, started)
    if not ranking.task_rank:
        log.error("every single-factor fit failed")
        return EXIT_COMPUTE
    return EXIT_OK


def cmd_stats(args) -> int:
    started = _now()
    src = Path(args.report)
    try:
        report = load_report(src)
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise UsageError(f"malformed report in {src}: {exc}") from None
    results = ttest_matrix(report)
    anova = None
    records = sparsity_records(report)
    if records["model"].size:
        try:
            anova = sparsity_anova(records, args.task)
        except StatsError as exc:
            log.warning("sparsity ANOVA skipped: %s", exc)
    out = Path(args.out)
    paths = write_stats(out, results, anova)
    inputs = [src / name for name in ("summary.json", "split_rmse.csv", "records.csv") if (src / name).exists()]
    write_manifest(out, "stats", {"task": args.task}, None, inputs, paths, started)
    return EXIT_OK


def cmd_project(args) -> int:
    started = _now()
    src = Path(args.ranking)
    try:
        ranking, projects = load_factor_ranking(src)
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise UsageError(f"malformed ranking in {src}: {exc}") from None
    cfg = TsneConfig(perplexity=args.perplexity, n_iter=args.n_iter, learning_rate=args.learning_rate,
                     seed=args.seed)
    atlas = build_atlas(ranking, projects, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = atlas.write_csv(out / "atlas.csv")
    write_manifest(out, "project", {"tsne": vars(cfg)}, args.seed, [src / "factor_embeddings.json"], [path], started)
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------

def _add_data_args(p):
    p.add_argument("--data", required=True, help="participant CSV")
    p.add_argument("--codebook", required=True, help="codebook JSON")


def _add_run_args(p, default_splits: int):
    p.add_argument("--tasks", help=f"comma-separated subset of {','.join(all_task_names())}")
    p.add_argument("--splits", type=int, default=default_splits)
    p.add_argument("--train-frac", type=float, default=0.75)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON benchmark config; flags below override it")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--jobs", type=int, help="parallel workers (default: $SPARSEBENCH_JOBS or CPU count)")
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsebench", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic dataset with planted structure")
    p.add_argument("--config", required=True, help="JSON generator config")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("ingest", help="validate a dataset and export its design matrix")
    _add_data_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("benchmark", help="cross-validated model comparison")
    _add_data_args(p)
    p.add_argument("--models", help=f"comma-separated subset of {','.join(MODELS)}")
    p.add_argument("--ridge-lambda", type=float)
    p.add_argument("--lasso-lambda", type=float)
    p.add_argument("--rf-n-trees", type=int)
    p.add_argument("--gb-n-trees", type=int)
    _add_run_args(p, 10)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("rank-factors", help="single-factor embedding networks and inverse ranks")
    _add_data_args(p)
    p.add_argument("--factors", help="comma-separated factor subset")
    _add_run_args(p, 1)
    p.set_defaults(func=cmd_rank_factors)

    p = sub.add_parser("stats", help="paired t-tests and the sparsity interaction F test")
    p.add_argument("--report", required=True, help="benchmark output directory")
    p.add_argument("--task", help="restrict the ANOVA to one task")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("project", help="t-SNE atlas of factor embeddings")
    p.add_argument("--ranking", required=True, help="rank-factors output directory")
    p.add_argument("--perplexity", type=float, default=5.0)
    p.add_argument("--n-iter", type=int, default=1000)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_project)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except USAGE_ERRORS as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
