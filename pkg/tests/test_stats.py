import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as sps

from sparsebench.harness import EvalReport
from sparsebench.stats import (
    TTEST_COLUMNS, SingularDesign, StatsError, ZeroVariance, betainc, f_sf, holm_bonferroni, nested_f_test,
    paired_ttest, sparsity_anova, t_cdf, t_sf_two_sided, ttest_matrix, write_stats,
)

mpmath.mp.dps = 30


def t_tail_oracle(t, nu):
    c = mpmath.gamma((nu + 1) / 2) / (mpmath.sqrt(nu * mpmath.pi) * mpmath.gamma(nu / 2))
    pdf = lambda x: c * (1 + x * x / nu) ** (-(nu + 1) / 2)
    return float(2 * mpmath.quad(pdf, [abs(t), mpmath.inf]))


def f_tail_oracle(f, d1, d2):
    c = mpmath.sqrt(mpmath.mpf(d1) ** d1 * mpmath.mpf(d2) ** d2) / mpmath.beta(d1 / 2, d2 / 2)
    pdf = lambda x: c * x ** (d1 / 2 - 1) * (d1 * x + d2) ** (-(d1 + d2) / 2)
    return float(mpmath.quad(pdf, [f, mpmath.inf]))


@pytest.mark.parametrize("t,nu", [(0.5, 8), (2.3, 8), (-4.1, 8), (1.0, 1), (3.0, 2.5), (0.01, 30), (6.0, 100)])
def test_t_tail_matches_integration(t, nu):
    assert t_sf_two_sided(t, nu) == pytest.approx(t_tail_oracle(t, nu), abs=1e-8)


@pytest.mark.parametrize("f,d1,d2", [(1.0, 1, 10), (3.5, 2, 50), (0.2, 6, 1990), (59.2, 9, 1000), (2.0, 5, 5)])
def test_f_tail_matches_integration(f, d1, d2):
    assert f_sf(f, d1, d2) == pytest.approx(f_tail_oracle(f, d1, d2), abs=1e-8)


def test_tail_edge_cases():
    assert t_sf_two_sided(0.0, 5) == 1.0
    assert t_sf_two_sided(math.inf, 5) == 0.0
    assert f_sf(0.0, 2, 3) == 1.0
    assert t_cdf(0.0, 4) == 0.5
    assert t_cdf(1.5, 4) + t_cdf(-1.5, 4) == pytest.approx(1.0)
    assert betainc(2, 3, 0) == 0 and betainc(2, 3, 1) == 1
    with pytest.raises(ValueError):
        betainc(2, 3, 1.5)


@settings(max_examples=60, deadline=None)
@given(a=st.floats(0.1, 50), b=st.floats(0.1, 50), x=st.floats(0.001, 0.999))
def test_betainc_matches_mpmath(a, b, x):
    want = float(mpmath.betainc(a, b, 0, x, regularized=True))
    assert betainc(a, b, x) == pytest.approx(want, abs=1e-10)


def test_holm_examples():
    np.testing.assert_allclose(holm_bonferroni([0.01, 0.04, 0.03]), [0.03, 0.06, 0.06], atol=1e-15)
    assert holm_bonferroni([0.2]) == [0.2]
    assert holm_bonferroni([1.0, 1.0, 1.0]) == [1.0, 1.0, 1.0]
    with pytest.raises(StatsError):
        holm_bonferroni([0.5, 1.2])


def holm_oracle(p):
    m = len(p)
    order = sorted(range(m), key=lambda i: p[i])
    out = [0.0] * m
    for k, i in enumerate(order):
        out[i] = min(1.0, max((m - j) * p[order[j]] for j in range(k + 1)))
    return out


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=25))
def test_holm_matches_definition(p):
    got = holm_bonferroni(p)
    np.testing.assert_allclose(got, holm_oracle(p), atol=1e-15)
    assert all(g >= q for g, q in zip(got, p))


def test_paired_t_direct_formula():
    d = np.array([1, 1, 1, 1, -1, 1, 1, -1, 1.0])
    b = np.random.default_rng(0).standard_normal(9)
    t, dof, p = paired_ttest(b + d, b)
    n, mean, sd = 9, 5 / 9, math.sqrt(sum((x - 5 / 9) ** 2 for x in d) / 8)
    assert t == pytest.approx(mean / (sd / math.sqrt(n)), abs=1e-10)
    assert dof == 8
    ref = sps.ttest_rel(b + d, b)
    assert p == pytest.approx(ref.pvalue, abs=1e-10)


def test_paired_t_zero_variance():
    with pytest.raises(ZeroVariance):
        paired_ttest([1, 2, 3], [1, 2, 3])
    with pytest.raises(ZeroVariance):
        paired_ttest([2, 3, 4], [1, 2, 3])
    with pytest.raises(StatsError):
        paired_ttest([1, 2], [1, 2, 3])


def test_ttest_matrix_21_rows_against_recomputation():
    rng = np.random.default_rng(1)
    models = ["ols", "ridge", "lasso", "random_forest", "gradient_boosting", "dnn", "embed_dnn"]
    means = {m: list(1 + 0.1 * k + 0.05 * rng.standard_normal(9)) for k, m in enumerate(models)}
    res = ttest_matrix(means)
    assert len(res) == 21 and all(r.dof == 8 for r in res)
    raw = []
    for r in res:
        ref = sps.ttest_rel(means[r.model_a], means[r.model_b])
        assert r.t == pytest.approx(ref.statistic, abs=1e-10)
        assert r.p_raw == pytest.approx(ref.pvalue, abs=1e-10)
        raw.append(ref.pvalue)
    np.testing.assert_allclose([r.p_corrected for r in res], holm_oracle(raw), atol=1e-10)


def test_ttest_matrix_zero_variance_pair():
    base = [1.0, 2.0, 1.5, 1.2]
    means = {"a": base, "b": list(base), "c": [1.3, 2.2, 1.4, 1.9]}
    res = {(r.model_a, r.model_b): r for r in ttest_matrix(means)}
    ab = res[("a", "b")]
    assert ab.note == "ZeroVariance" and math.isnan(ab.t) and math.isnan(ab.p_corrected)
    ac, bc = res[("a", "c")], res[("b", "c")]
    # a family of two, not three
    assert holm_bonferroni([ac.p_raw, bc.p_raw]) == [ac.p_corrected, bc.p_corrected]


def test_ttest_matrix_from_report():
    rep = EvalReport(["t1", "t2", "t3"], ["x", "y"], 2, 0)
    vals = {"x": [1.0, 2.0, 3.0], "y": [1.5, 2.1, 3.6]}
    for m, v in vals.items():
        for i, t in enumerate(rep.tasks):
            rep.split_rmse[(t, m, 0)] = v[i] - 0.1
            rep.split_rmse[(t, m, 1)] = v[i] + 0.1
    (r,) = ttest_matrix(rep)
    assert r.t == pytest.approx(sps.ttest_rel(vals["x"], vals["y"]).statistic)


def test_f_equals_t_squared():
    rng = np.random.default_rng(2)
    n = 40
    x = rng.standard_normal(n)
    y = 0.4 * x + rng.standard_normal(n)
    res = nested_f_test(np.ones((n, 1)), np.column_stack([np.ones(n), x]), y)
    xc = x - x.mean()
    slope = xc @ (y - y.mean()) / (xc @ xc)
    resid = y - y.mean() - slope * xc
    se = math.sqrt(resid @ resid / (n - 2) / (xc @ xc))
    assert res.f_stat == pytest.approx((slope / se) ** 2, rel=1e-8)
    assert res.p == pytest.approx(t_sf_two_sided(slope / se, n - 2), abs=1e-10)
    assert (res.df_num, res.df_den) == (1, n - 2)


def planted_records(slopes, n_per_model=1000, noise=0.1, seed=0):
    rng = np.random.default_rng(seed)
    model, spars, err = [], [], []
    for name, b in slopes.items():
        s = rng.integers(0, 50, n_per_model)
        model += [name] * n_per_model
        spars.append(s)
        err.append(0.5 + b * s / 50 + noise * rng.standard_normal(n_per_model))
    return {"model": np.array(model, dtype=object), "sparsity": np.concatenate(spars),
            "abs_error": np.concatenate(err), "task": np.array(["T"] * len(model), dtype=object)}


def test_anova_detects_planted_interaction():
    res = sparsity_anova(planted_records({"A": 0.1, "B": 1.0}))
    assert res.p < 0.01 and res.f_stat > 100
    assert res.levels == ("A", "B") and res.df_num == 1 and res.n == 2000


def test_anova_equal_slopes():
    res = sparsity_anova(planted_records({"A": 0.5, "B": 0.5, "C": 0.5}, seed=3))
    assert res.df_num == 2 and res.df_den == 3000 - 6
    assert res.p > 0.01


def test_anova_recomputed_by_lstsq():
    rec = planted_records({"A": 0.2, "B": 0.4, "C": 0.3}, n_per_model=50, noise=0.5, seed=4)
    res = sparsity_anova(rec)
    s, e = rec["sparsity"].astype(float), rec["abs_error"]
    d = np.column_stack([(rec["model"] == m).astype(float) for m in ("B", "C")])
    red = np.column_stack([np.ones(150), d, s])
    full = np.column_stack([red, d * s[:, None]])
    rss = lambda X: float(np.sum((e - X @ np.linalg.lstsq(X, e, rcond=None)[0]) ** 2))
    f = ((rss(red) - rss(full)) / 2) / (rss(full) / 144)
    assert res.f_stat == pytest.approx(f, rel=1e-9)
    assert res.p == pytest.approx(sps.f.sf(f, 2, 144), abs=1e-10)


def test_anova_singular():
    rec = planted_records({"A": 0.1, "B": 1.0}, n_per_model=10)
    rec["sparsity"][:] = 3
    with pytest.raises(SingularDesign):
        sparsity_anova(rec)
    with pytest.raises(SingularDesign):
        sparsity_anova(planted_records({"A": 0.1}))


def test_anova_task_filter():
    a = planted_records({"A": 0.1, "B": 1.0}, n_per_model=30)
    b = planted_records({"A": 0.5, "B": 0.5}, n_per_model=30, seed=1)
    both = {k: np.concatenate([a[k], b[k]]) for k in a}
    both["task"] = np.array(["T1"] * 60 + ["T2"] * 60, dtype=object)
    assert sparsity_anova(both, task="T1").f_stat == pytest.approx(sparsity_anova(a).f_stat)


def test_write_stats(tmp_path):
    rng = np.random.default_rng(5)
    means = {m: list(rng.uniform(1, 2, 9)) for m in "abcdefg"}
    res = ttest_matrix(means)
    anova = sparsity_anova(planted_records({"A": 0.1, "B": 1.0}, n_per_model=20))
    paths = write_stats(tmp_path, res, anova)
    lines = paths[0].read_text().splitlines()
    assert lines[0] == ",".join(TTEST_COLUMNS) and len(lines) == 22
    assert json.loads((tmp_path / "anova.json").read_text())["levels"] == ["A", "B"]
    assert len(json.loads((tmp_path / "ttests.json").read_text())) == 21
