"""Paired t-tests with Holm step-down correction, and the nested-regression F test.

Tail probabilities come from the regularized incomplete beta function,
evaluated with a modified-Lentz continued fraction.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from itertools import combinations
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

_CF_EPS = 1e-16
_CF_TINY = 1e-300
_CF_MAX_ITER = 10_000


class StatsError(ValueError):
    pass


class ZeroVariance(StatsError):
    pass


class SingularDesign(StatsError):
    pass


# -- special functions --------------------------------------------------------

def _betacf(a: float, b: float, x: float) -> float:
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _CF_TINY else _CF_TINY)
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _CF_TINY else _CF_TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _CF_TINY else _CF_TINY
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _CF_TINY else _CF_TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _CF_TINY else _CF_TINY
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def _front(a: float, b: float, x: float) -> float:
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    return math.exp(log_front)


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0 <= x <= 1:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0 or x == 1:
        return float(x)
    if x < (a + 1) / (a + b + 2):
        return _front(a, b, x) * _betacf(a, b, x) / a
    return 1.0 - _front(b, a, 1 - x) * _betacf(b, a, 1 - x) / b


def betainc_upper(a: float, b: float, x: float) -> float:
    """1 - I_x(a, b), without cancellation in the far tail."""
    if not 0 <= x <= 1:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0 or x == 1:
        return 1.0 - float(x)
    return betainc(b, a, 1.0 - x)


def t_sf_two_sided(t: float, dof: float) -> float:
    """P(|T| >= |t|) for Student's t with ``dof`` degrees of freedom."""
    if dof <= 0:
        raise ValueError("dof must be positive")
    if math.isinf(t):
        return 0.0
    return min(1.0, betainc(dof / 2.0, 0.5, dof / (dof + t * t)))


def t_cdf(t: float, dof: float) -> float:
    half = 0.5 * t_sf_two_sided(t, dof)
    return 1.0 - half if t > 0 else half


def f_sf(f: float, d1: float, d2: float) -> float:
    """P(F >= f) for the F(d1, d2) distribution."""
    if d1 <= 0 or d2 <= 0:
        raise ValueError("degrees of freedom must be positive")
    if f <= 0:
        return 1.0
    if math.isinf(f):
        return 0.0
    return betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f))


# -- t-tests --------------------------------------------------------------------

@dataclass(frozen=True)
class PairedTestResult:
    model_a: str
    model_b: str
    t: float
    dof: int
    p_raw: float
    p_corrected: float
    note: str = ""


def paired_ttest(a, b) -> tuple[float, int, float]:
    """Two-sided paired t-test on ``a - b`` (sample sd, n-1 divisor)."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise StatsError(f"length mismatch: {a.size} vs {b.size}")
    n = a.size
    if n < 2:
        raise StatsError("need at least 2 pairs")
    d = a - b
    sd = float(d.std(ddof=1))
    if sd == 0 or not np.isfinite(sd):
        raise ZeroVariance("paired differences have zero variance; t is undefined")
    t = float(d.mean() / (sd / math.sqrt(n)))
    return t, n - 1, t_sf_two_sided(t, n - 1)


def holm_bonferroni(p_values: Sequence[float]) -> list[float]:
    """Holm step-down adjusted p-values, returned in input order."""
    p = np.asarray(p_values, dtype=float)
    if p.size and (np.any(~np.isfinite(p)) or p.min() < 0 or p.max() > 1):
        raise StatsError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    stepped = np.minimum(1.0, (m - np.arange(m)) * p[order])
    adjusted = np.maximum.accumulate(stepped) if m else stepped
    out = np.empty(m)
    out[order] = adjusted
    return out.tolist()


def ttest_matrix(report_or_means) -> list[PairedTestResult]:
    """All unordered model pairs, tested over per-task mean RMSEs.

    Accepts an EvalReport or a mapping model -> per-task means (same task
    order for every model). Pairs with zero-variance differences are reported
    with NaN statistics and left out of the correction family.
    """
    means = _task_means(report_or_means)
    models = list(means)
    if len(models) < 2:
        raise StatsError("need at least two models")
    lengths = {len(v) for v in means.values()}
    if len(lengths) != 1:
        raise StatsError("task coverage differs between models")
    dof = lengths.pop() - 1
    raw = []
    for a, b in combinations(models, 2):
        try:
            raw.append((a, b, *paired_ttest(means[a], means[b]), ""))
        except ZeroVariance:
            raw.append((a, b, math.nan, dof, math.nan, "ZeroVariance"))
    family = [i for i, r in enumerate(raw) if not r[5]]
    corrected = dict(zip(family, holm_bonferroni([raw[i][4] for i in family])))
    return [PairedTestResult(a, b, t, dof, p, corrected.get(i, math.nan), note)
            for i, (a, b, t, dof, p, note) in enumerate(raw)]


def _task_means(obj) -> dict[str, list[float]]:
    if isinstance(obj, Mapping):
        return {k: list(map(float, v)) for k, v in obj.items()}
    report = obj
    out = {}
    for m in report.models:
        vals = []
        for t in report.tasks:
            if not report.split_values(t, m):
                raise StatsError(f"model {m!r} has no results on task {t!r}")
            vals.append(report.mean_sd(t, m)[0])
        out[m] = vals
    return out


# -- nested F test ----------------------------------------------------------------

@dataclass(frozen=True)
class AnovaResult:
    rss_reduced: float
    rss_full: float
    df_reduced: int
    df_full: int
    f_stat: float
    df_num: int
    df_den: int
    p: float
    n: int = 0
    levels: tuple = ()

    def to_json(self) -> str:
        d = asdict(self)
        d["levels"] = list(self.levels)
        return json.dumps(d, indent=2)


def _rss(X: np.ndarray, y: np.ndarray) -> float:
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise SingularDesign(f"design with {X.shape[1]} columns is rank deficient")
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    r = y - X @ beta
    return float(r @ r)


def nested_f_test(X_reduced, X_full, y) -> AnovaResult:
    """F test for the columns the full design adds to the reduced one."""
    Xr = np.asarray(X_reduced, dtype=float)
    Xf = np.asarray(X_full, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    n = y.size
    if Xr.shape[0] != n or Xf.shape[0] != n:
        raise StatsError("row counts differ")
    df_r, df_f = n - Xr.shape[1], n - Xf.shape[1]
    if df_f <= 0 or df_r <= df_f:
        raise SingularDesign("full model must add columns and leave residual degrees of freedom")
    rss_r, rss_f = _rss(Xr, y), _rss(Xf, y)
    rss_f = min(rss_f, rss_r)  # nested fits; guards rounding
    df_num = df_r - df_f
    if rss_f == 0:
        f = math.inf if rss_r > 0 else 0.0
    else:
        f = ((rss_r - rss_f) / df_num) / (rss_f / df_f)
    return AnovaResult(rss_r, rss_f, df_r, df_f, float(f), df_num, df_f, f_sf(f, df_num, df_f), n)


def sparsity_anova(records, task: str | None = None) -> AnovaResult:
    """Does the error-vs-sparsity slope differ between models?

    Response is per-sample absolute error. Reduced design: intercept, model
    dummies (first level in sorted order is the reference) and sparsity. Full
    design adds one model-dummy x sparsity column per non-reference level.
    """
    model = np.asarray(records["model"], dtype=object)
    spars = np.asarray(records["sparsity"], dtype=float)
    err = np.asarray(records["abs_error"], dtype=float)
    if task is not None:
        keep = np.asarray(records["task"], dtype=object) == task
        model, spars, err = model[keep], spars[keep], err[keep]
    levels = sorted(set(model.tolist()))
    if len(levels) < 2:
        raise SingularDesign("need at least two model levels")
    if spars.size == 0 or np.ptp(spars) == 0:
        raise SingularDesign("sparsity is constant")
    dummies = np.column_stack([(model == lv).astype(float) for lv in levels[1:]])
    reduced = np.column_stack([np.ones(err.size), dummies, spars])
    full = np.column_stack([reduced, dummies * spars[:, None]])
    res = nested_f_test(reduced, full, err)
    return AnovaResult(**{**asdict(res), "levels": tuple(levels)})


# -- export -------------------------------------------------------------------------

TTEST_COLUMNS = ("Model A", "Model B", "T", "dof", "p-corrected")


def _fmt(x: float) -> str:
    return "" if isinstance(x, float) and math.isnan(x) else repr(x)


def write_ttests(results: Sequence[PairedTestResult], path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TTEST_COLUMNS)
        for r in results:
            w.writerow([r.model_a, r.model_b, _fmt(r.t), r.dof, _fmt(r.p_corrected)])
    return path


def write_stats(out_dir, results: Sequence[PairedTestResult], anova: AnovaResult | None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [write_ttests(results, out / "ttests.csv")]
    detail = out / "ttests.json"
    detail.write_text(json.dumps([asdict(r) for r in results], indent=2), encoding="utf-8")
    paths.append(detail)
    if anova is not None:
        apath = out / "anova.json"
        apath.write_text(anova.to_json(), encoding="utf-8")
        paths.append(apath)
    return paths
