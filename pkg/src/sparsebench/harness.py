"""Cross-validated benchmark: tasks x models x random 75/25 splits.

Every random choice comes from a per-job seed::

    derive_seed(master, *parts) = first 8 bytes (little-endian) of
        sha256("|".join([master, *parts]))

Splits use ``derive_seed(master, task, "split", s)`` and do not depend on the
model, so all models of a (task, split) see identical row partitions.
Model fits use ``derive_seed(master, task, model, s)``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from . import linear_models, tree_models
from .codebook import UnknownFactor
from .dataio import Dataset
from .neural import LINEAR_HEAD, RELU_HEAD, TrainConfig, single_factor_net, train_embedded, train_full
from .preprocess import PreprocessConfig, fit_transform

log = logging.getLogger(__name__)

MEASURES = ("COMP", "EF", "EM")
TIMEPOINTS = ("M2", "M3", "dM3")
NO_COGNITIVE, WITH_M2_COGNITIVE = "NoCognitive", "WithM2Cognitive"
MODELS = ("ols", "ridge", "lasso", "random_forest", "gradient_boosting", "dnn", "embed_dnn")


class BenchmarkError(ValueError):
    pass


def derive_seed(master: int, *parts) -> int:
    text = "|".join(str(p) for p in (master, *parts))
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def _digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
        h.update(b"|")
    return h.hexdigest()[:16]


# -- tasks --------------------------------------------------------------------

@dataclass(frozen=True)
class PredictionTask:
    name: str
    measure: str
    timepoint: str
    policy: str
    head: str

    def targets(self, ds: Dataset) -> np.ndarray:
        if self.timepoint == "dM3":
            return ds.outcomes[f"{self.measure}_M3"] - ds.outcomes[f"{self.measure}_M2"]
        return ds.outcomes[f"{self.measure}_{self.timepoint}"]

    def predictors(self, ds: Dataset) -> Dataset:
        if self.policy == NO_COGNITIVE:
            return ds.without_projects(["Cognitive"])
        return ds


def make_task(name: str) -> PredictionTask:
    try:
        measure, timepoint = name.split("_")
    except ValueError:
        raise BenchmarkError(f"bad task name {name!r}") from None
    if measure not in MEASURES or timepoint not in TIMEPOINTS:
        raise BenchmarkError(f"unknown task {name!r}; valid: {', '.join(all_task_names())}")
    policy = NO_COGNITIVE if timepoint == "M2" else WITH_M2_COGNITIVE
    head = LINEAR_HEAD if timepoint == "dM3" else RELU_HEAD
    return PredictionTask(name, measure, timepoint, policy, head)


def all_task_names() -> list[str]:
    return [f"{m}_{t}" for t in TIMEPOINTS for m in MEASURES]


def build_tasks(names: Iterable[str] | None = None) -> list[PredictionTask]:
    return [make_task(n) for n in (names or all_task_names())]


# -- models -------------------------------------------------------------------

@dataclass(frozen=True)
class BenchmarkConfig:
    ridge_lambda: float = 1.0
    lasso_lambda: float = 1.0
    lasso_tol: float = 1e-7
    lasso_max_iter: int = 10_000
    rf_n_trees: int = 100
    rf_max_depth: int | None = None
    rf_min_samples_leaf: int = 1
    rf_max_features: int | float | str | None = None
    gb_n_trees: int = 100
    gb_max_depth: int = 3
    gb_learning_rate: float = 0.1
    train: TrainConfig = field(default_factory=TrainConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)

    @classmethod
    def from_dict(cls, doc: dict) -> "BenchmarkConfig":
        doc = dict(doc)
        train = TrainConfig(**doc.pop("train", {}))
        pre = PreprocessConfig(**doc.pop("preprocess", {}))
        return cls(**doc, train=train, preprocess=pre)

    def to_dict(self) -> dict:
        return asdict(self)


def fit_model(name: str, X: np.ndarray, y: np.ndarray, dm, head: str, seed: int, cfg: BenchmarkConfig):
    """Fit one model type; the result exposes ``predict(X)``."""
    if name == "ols":
        return linear_models.fit_ols(X, y)
    if name == "ridge":
        return linear_models.fit_ridge(X, y, cfg.ridge_lambda)
    if name == "lasso":
        fit = linear_models.fit_lasso(X, y, cfg.lasso_lambda, cfg.lasso_tol, cfg.lasso_max_iter)
        if not fit.converged:
            log.warning("lasso hit %d sweeps without converging", fit.iterations)
        return fit
    if name == "random_forest":
        return tree_models.fit_random_forest(X, y, cfg.rf_n_trees, cfg.rf_max_depth, cfg.rf_min_samples_leaf,
                                             cfg.rf_max_features, seed)
    if name == "gradient_boosting":
        return tree_models.fit_gradient_boosting(X, y, cfg.gb_n_trees, cfg.gb_max_depth, cfg.gb_learning_rate,
                                                 seed)
    if name == "dnn":
        return train_full(dm, y, replace(cfg.train, seed=seed), head)
    if name == "embed_dnn":
        return train_embedded(dm, y, replace(cfg.train, seed=seed), head)
    raise BenchmarkError(f"unknown model {name!r}; valid: {', '.join(MODELS)}")


def check_models(names: Sequence[str]) -> None:
    bad = [m for m in names if m not in MODELS]
    if bad:
        raise BenchmarkError(f"unknown model(s) {', '.join(bad)}; valid: {', '.join(MODELS)}")
    if len(set(names)) != len(names):
        raise BenchmarkError("model listed twice")


# -- metrics ------------------------------------------------------------------

def rmse(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=float).ravel()
    t = np.asarray(targets, dtype=float).ravel()
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape[0]} predictions, {t.shape[0]} targets")
    if p.size == 0:
        raise ValueError("rmse of empty input")
    return float(np.sqrt(np.mean((p - t) ** 2)))


# -- splitting ----------------------------------------------------------------

MIN_TASK_ROWS = 8


def task_rows(task: PredictionTask, ds: Dataset) -> np.ndarray:
    return np.flatnonzero(~np.isnan(task.targets(ds)))


def make_split(task: PredictionTask, ds: Dataset, split: int, seed: int, train_frac: float = 0.75):
    rows = task_rows(task, ds)
    if rows.size < MIN_TASK_ROWS:
        raise BenchmarkError(f"task {task.name}: only {rows.size} rows with an outcome (need {MIN_TASK_ROWS})")
    perm = np.random.default_rng(derive_seed(seed, task.name, "split", split)).permutation(rows.size)
    n_train = int(round(train_frac * rows.size))
    n_train = min(max(n_train, 2), rows.size - 1)
    return np.sort(rows[perm[:n_train]]), np.sort(rows[perm[n_train:]])


def prepare_split(task: PredictionTask, ds: Dataset, split: int, seed: int, train_frac: float,
                  pre: PreprocessConfig):
    train_rows, test_rows = make_split(task, ds, split, seed, train_frac)
    pred = task.predictors(ds)
    dm_train, dm_test = fit_transform(pred.take(train_rows), pred.take(test_rows), pre)
    y = task.targets(ds)
    return train_rows, test_rows, dm_train, dm_test, y[train_rows], y[test_rows]


def scaler_digest(params: dict) -> str:
    items = sorted(params.items())
    return _digest(np.array([v for _, mv in items for v in mv], dtype=float),
                   np.frombuffer("|".join(k for k, _ in items).encode(), dtype=np.uint8))


# -- report -------------------------------------------------------------------

RECORD_FIELDS = ("task", "model", "split", "participant", "sparsity", "abs_error", "prediction", "target")


@dataclass
class JobResult:
    task: str
    model: str
    split: int
    rmse: float | None
    error: str | None
    split_digest: str
    scaler_digest: str
    n_train: int
    n_test: int
    records: list[tuple] = field(default_factory=list)


@dataclass
class EvalReport:
    tasks: list[str]
    models: list[str]
    n_splits: int
    seed: int
    split_rmse: dict[tuple[str, str, int], float] = field(default_factory=dict)
    failures: dict[tuple[str, str, int], str] = field(default_factory=dict)
    split_digests: dict[tuple[str, str, int], str] = field(default_factory=dict)
    scaler_digests: dict[tuple[str, str, int], str] = field(default_factory=dict)
    sizes: dict[tuple[str, str, int], tuple[int, int]] = field(default_factory=dict)
    records: list[tuple] = field(default_factory=list)

    def split_values(self, task: str, model: str) -> list[float]:
        return [self.split_rmse[(task, model, s)] for s in range(self.n_splits) if (task, model, s) in self.split_rmse]

    def mean_sd(self, task: str, model: str) -> tuple[float, float]:
        """Mean and population SD of the stored split RMSEs."""
        vals = self.split_values(task, model)
        if not vals:
            raise BenchmarkError(f"no results for model {model!r} on task {task!r}")
        arr = np.asarray(vals)
        return float(arr.mean()), float(arr.std(ddof=0))

    def task_means(self, model: str) -> list[float]:
        return [self.mean_sd(t, model)[0] for t in self.tasks]

    def ranks(self, task: str) -> dict[str, float]:
        return {row.model: row.rank for row in rank_models(self, task)}


@dataclass(frozen=True)
class RankRow:
    model: str
    mean_rmse: float
    sd_rmse: float
    rank: float


def rank_models(report: EvalReport, task: str) -> list[RankRow]:
    """Ascending mean-RMSE ranks with mid-ranks on ties, in report model order."""
    stats = []
    for m in report.models:
        vals = report.split_values(task, m)
        if not vals:
            raise BenchmarkError(f"missing results for model {m!r} on task {task!r}")
        stats.append(report.mean_sd(task, m))
    ranks = rankdata([s[0] for s in stats], method="average")
    return [RankRow(m, mu, sd, float(r)) for m, (mu, sd), r in zip(report.models, stats, ranks)]


def sparsity_records(report: EvalReport) -> dict[str, np.ndarray]:
    """Flat per-sample table: one row per (test sample, model, split)."""
    cols = list(zip(*report.records)) if report.records else [()] * len(RECORD_FIELDS)
    out = {}
    for name, col in zip(RECORD_FIELDS, cols):
        if name in ("task", "model", "participant"):
            out[name] = np.asarray(col, dtype=object)
        elif name in ("split", "sparsity"):
            out[name] = np.asarray(col, dtype=int)
        else:
            out[name] = np.asarray(col, dtype=float)
    return out


# -- execution ------------------------------------------------------------------

_WORKER_DS: Dataset | None = None


def _init_worker(ds: Dataset) -> None:
    global _WORKER_DS
    _WORKER_DS = ds


def run_job(ds: Dataset, task: PredictionTask, model: str, split: int, seed: int, train_frac: float,
            cfg: BenchmarkConfig) -> JobResult:
    train_rows, test_rows, dm_tr, dm_te, y_tr, y_te = prepare_split(
        task, ds, split, seed, train_frac, cfg.preprocess)
    sd = _digest(train_rows, test_rows)
    scd = scaler_digest(dm_tr.scaler_params)
    try:
        fitted = fit_model(model, dm_tr.values, y_tr, dm_tr, task.head, derive_seed(seed, task.name, model, split),
                           cfg)
        pred = np.asarray(fitted.predict(dm_te.values), dtype=float)
        if not np.all(np.isfinite(pred)):
            raise FloatingPointError("non-finite predictions")
    except Exception as exc:  # noqa: BLE001 - failures are recorded, not fatal
        log.warning("%s/%s/split %d failed: %s", task.name, model, split, exc)
        return JobResult(task.name, model, split, None, f"{type(exc).__name__}: {exc}", sd, scd,
                         len(train_rows), len(test_rows))
    err = np.abs(pred - y_te)
    recs = [
        (task.name, model, split, ds.participant_ids[r], int(s), float(e), float(p), float(t))
        for r, s, e, p, t in zip(test_rows, dm_te.row_sparsity, err, pred, y_te)
    ]
    return JobResult(task.name, model, split, rmse(pred, y_te), None, sd, scd, len(train_rows), len(test_rows), recs)


def _run_job_worker(args) -> JobResult:
    return run_job(_WORKER_DS, *args)


def run_benchmark(ds: Dataset, tasks: Sequence[PredictionTask] | None = None, models: Sequence[str] = MODELS,
                  n_splits: int = 10, train_frac: float = 0.75, seed: int = 0,
                  config: BenchmarkConfig | None = None, jobs: int = 1) -> EvalReport:
    """Fit every (task, model, split) and collect RMSEs and per-sample errors.

    The report does not depend on ``jobs``: results are assembled in
    (task, split, model) order whatever order the workers finish in.
    """
    cfg = config or BenchmarkConfig()
    tasks = list(tasks) if tasks is not None else build_tasks()
    models = list(models)
    check_models(models)
    if n_splits < 1 or not 0 < train_frac < 1:
        raise BenchmarkError("need n_splits >= 1 and 0 < train_frac < 1")
    for t in tasks:
        if task_rows(t, ds).size < MIN_TASK_ROWS:
            raise BenchmarkError(f"task {t.name}: fewer than {MIN_TASK_ROWS} rows with an outcome")
    work = [(t, m, s, seed, train_frac, cfg) for t in tasks for s in range(n_splits) for m in models]
    if jobs > 1:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(ds,)) as pool:
            results = list(pool.map(_run_job_worker, work))
    else:
        results = [run_job(ds, *w) for w in work]

    report = EvalReport([t.name for t in tasks], models, n_splits, seed)
    for r in results:
        key = (r.task, r.model, r.split)
        report.split_digests[key] = r.split_digest
        report.scaler_digests[key] = r.scaler_digest
        report.sizes[key] = (r.n_train, r.n_test)
        if r.error is not None:
            report.failures[key] = r.error
        else:
            report.split_rmse[key] = r.rmse
            report.records.extend(r.records)
    return report


# -- export / import ------------------------------------------------------------

def write_report(report: EvalReport, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    split_path, summary_path, rec_path = out / "split_rmse.csv", out / "summary.json", out / "records.csv"
    with split_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "model", "split", "rmse", "n_train", "n_test", "split_digest", "scaler_digest", "error"])
        for t in report.tasks:
            for m in report.models:
                for s in range(report.n_splits):
                    key = (t, m, s)
                    if key not in report.split_digests:
                        continue
                    val = report.split_rmse.get(key)
                    w.writerow([t, m, s, "" if val is None else repr(val), *report.sizes[key],
                                report.split_digests[key], report.scaler_digests[key], report.failures.get(key, "")])
    summary = {"tasks": report.tasks, "models": report.models, "n_splits": report.n_splits, "seed": report.seed,
               "sd_convention": "population", "per_task": {}}
    for t in report.tasks:
        try:
            rows = rank_models(report, t)
        except BenchmarkError as exc:
            summary["per_task"][t] = {"error": str(exc)}
            continue
        summary["per_task"][t] = {r.model: {"mean_rmse": r.mean_rmse, "sd_rmse": r.sd_rmse, "rank": r.rank}
                                  for r in rows}
    summary["failures"] = [{"task": k[0], "model": k[1], "split": k[2], "error": v}
                           for k, v in sorted(report.failures.items())]
    summary_path.write_text(json.dumps(summary, indent=2), encoding="utf-8")
    with rec_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_FIELDS)
        for r in report.records:
            w.writerow([r[0], r[1], r[2], r[3], r[4], repr(r[5]), repr(r[6]), repr(r[7])])
    return [split_path, summary_path, rec_path]


def load_report(out_dir) -> EvalReport:
    out = Path(out_dir)
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    report = EvalReport(summary["tasks"], summary["models"], summary["n_splits"], summary["seed"])
    with (out / "split_rmse.csv").open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            key = (row["task"], row["model"], int(row["split"]))
            report.split_digests[key] = row["split_digest"]
            report.scaler_digests[key] = row["scaler_digest"]
            report.sizes[key] = (int(row["n_train"]), int(row["n_test"]))
            if row["error"]:
                report.failures[key] = row["error"]
            else:
                report.split_rmse[key] = float(row["rmse"])
    rec_path = out / "records.csv"
    if rec_path.exists():
        with rec_path.open(newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                report.records.append((row["task"], row["model"], int(row["split"]), row["participant"],
                                       int(row["sparsity"]), float(row["abs_error"]), float(row["prediction"]),
                                       float(row["target"])))
    return report


# -- factor ranking ---------------------------------------------------------------

@dataclass
class FactorRanking:
    tasks: list[str]
    factors: list[str]
    task_rmse: dict[tuple[str, str], float] = field(default_factory=dict)
    task_rank: dict[tuple[str, str], float] = field(default_factory=dict)
    embeddings: dict[tuple[str, str], np.ndarray] = field(default_factory=dict, repr=False)
    failures: dict[tuple[str, str, int], str] = field(default_factory=dict)

    def average_rank(self, factor: str) -> float:
        ranks = [self.task_rank[(t, factor)] for t in self.tasks if (t, factor) in self.task_rank]
        if not ranks:
            raise BenchmarkError(f"factor {factor!r} was not ranked on any task")
        return float(np.mean(ranks))

    def inverse_rank(self, factor: str) -> float:
        return inverse_rank(self.average_rank(factor))

    def ranked_factors(self) -> list[str]:
        return [f for f in self.factors if any((t, f) in self.task_rank for t in self.tasks)]

    def table(self) -> list[dict]:
        rows = []
        for idx, f in enumerate(self.factors):
            if f not in self.ranked_factors():
                continue
            avg = self.average_rank(f)
            rows.append({"index": idx, "factor": f, "average_rank": avg, "inverse_rank": inverse_rank(avg),
                         "n_tasks": sum((t, f) in self.task_rank for t in self.tasks)})
        return rows


def inverse_rank(average_rank: float) -> float:
    if not average_rank >= 1:
        raise ValueError(f"average rank must be >= 1, got {average_rank}")
    return 1.0 / average_rank


def task_factors(task: PredictionTask, ds: Dataset) -> list[str]:
    """Factors that participate in ``task``: those with included predictor variables."""
    pred = task.predictors(ds)
    present = {v.factor for v in pred.variables}
    return [f for f in ds.codebook.factor_names if f in present]


def _factor_job(ds, task, factor, split, seed, train_frac, cfg):
    train_rows, test_rows, dm_tr, dm_te, y_tr, y_te = prepare_split(task, ds, split, seed, train_frac,
                                                                    cfg.preprocess)
    tcfg = replace(cfg.train, seed=derive_seed(seed, task.name, "factor", factor, split))
    try:
        net = single_factor_net(dm_tr, y_tr, factor, tcfg, task.head)
        pred = net.predict(dm_te.values)
        return task.name, factor, split, rmse(pred, y_te), net.factor_embedding(factor), None
    except Exception as exc:  # noqa: BLE001
        return task.name, factor, split, None, None, f"{type(exc).__name__}: {exc}"


def _factor_job_worker(args):
    return _factor_job(_WORKER_DS, *args)


def rank_factors(ds: Dataset, tasks: Sequence[PredictionTask] | None = None, seed: int = 0, n_splits: int = 10,
                 train_frac: float = 0.75, config: BenchmarkConfig | None = None, factors: Sequence[str] | None = None,
                 jobs: int = 1) -> FactorRanking:
    """Train one single-factor embedding network per (task, factor, split).

    Per task, factors are ranked by mean test RMSE (1 = lowest, mid-ranks on
    ties); the factor's average rank is taken over the tasks it took part in.
    """
    cfg = config or BenchmarkConfig()
    tasks = list(tasks) if tasks is not None else build_tasks()
    names = ds.codebook.factor_names
    if factors is not None:
        for f in factors:
            if f not in names:
                raise UnknownFactor(f)
    wanted = set(factors) if factors is not None else set(names)
    work = []
    for t in tasks:
        for f in task_factors(t, ds):
            if f in wanted:
                work.extend((t, f, s, seed, train_frac, cfg) for s in range(n_splits))
    if jobs > 1:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=(ds,)) as pool:
            results = list(pool.map(_factor_job_worker, work))
    else:
        results = [_factor_job(ds, *w) for w in work]

    ranking = FactorRanking([t.name for t in tasks], [f for f in names if f in wanted])
    per_key: dict[tuple[str, str], list] = {}
    for task_name, f, s, err, emb, fail in results:
        if fail is not None:
            log.warning("factor %s on %s split %d failed: %s", f, task_name, s, fail)
            ranking.failures[(task_name, f, s)] = fail
            continue
        per_key.setdefault((task_name, f), []).append((err, emb))
    for (task_name, f), vals in per_key.items():
        ranking.task_rmse[(task_name, f)] = float(np.mean([v[0] for v in vals]))
        ranking.embeddings[(task_name, f)] = np.mean([v[1] for v in vals], axis=0)
    for t in ranking.tasks:
        fs = [f for f in ranking.factors if (t, f) in ranking.task_rmse]
        if not fs:
            continue
        r = rankdata([ranking.task_rmse[(t, f)] for f in fs], method="average")
        for f, rank in zip(fs, r):
            ranking.task_rank[(t, f)] = float(rank)
    return ranking


def write_factor_ranking(ranking: FactorRanking, out_dir, codebook=None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table_path, emb_path = out / "factor_ranking.csv", out / "factor_embeddings.json"
    projects = dict(codebook.factors) if codebook is not None else {}
    with table_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "factor", "project", "average_rank", "inverse_rank", "n_tasks"])
        for row in ranking.table():
            w.writerow([row["index"], row["factor"], projects.get(row["factor"], ""), repr(row["average_rank"]),
                        repr(row["inverse_rank"]), row["n_tasks"]])
    doc = {
        "tasks": ranking.tasks,
        "factors": ranking.factors,
        "projects": projects,
        "task_rmse": [{"task": t, "factor": f, "rmse": v} for (t, f), v in sorted(ranking.task_rmse.items())],
        "task_rank": [{"task": t, "factor": f, "rank": v} for (t, f), v in sorted(ranking.task_rank.items())],
        "embeddings": [{"task": t, "factor": f, "vector": v.tolist()}
                       for (t, f), v in sorted(ranking.embeddings.items())],
        "failures": [{"task": k[0], "factor": k[1], "split": k[2], "error": v}
                     for k, v in sorted(ranking.failures.items())],
    }
    emb_path.write_text(json.dumps(doc, indent=2), encoding="utf-8")
    return [table_path, emb_path]


def load_factor_ranking(out_dir) -> tuple[FactorRanking, dict[str, str]]:
    doc = json.loads((Path(out_dir) / "factor_embeddings.json").read_text(encoding="utf-8"))
    ranking = FactorRanking(doc["tasks"], doc["factors"])
    for r in doc["task_rmse"]:
        ranking.task_rmse[(r["task"], r["factor"])] = r["rmse"]
    for r in doc["task_rank"]:
        ranking.task_rank[(r["task"], r["factor"])] = r["rank"]
    for r in doc["embeddings"]:
        ranking.embeddings[(r["task"], r["factor"])] = np.asarray(r["vector"], dtype=float)
    if not all(math.isfinite(v) for v in ranking.task_rmse.values()):
        raise BenchmarkError("non-finite factor RMSE in ranking file")
    return ranking, doc.get("projects", {})
